/**
 * Annotator-side logic with no DOM attached: the question queue, judgment
 * submission with a retry buffer, and progress bookkeeping. The DOM layer
 * in app.ts is a thin shell over this so the behaviour is testable headless.
 */

export type Judgment = "HI" | "I" | "IR";

export const JUDGMENTS: Judgment[] = ["HI", "I", "IR"];

export const KEY_TO_JUDGMENT: Record<string, Judgment> = {
  "1": "HI",
  "2": "I",
  "3": "IR",
};

export const JUDGMENT_LABELS: Record<Judgment, string> = {
  HI: "Highly Informative",
  I: "Informative",
  IR: "Irrelevant",
};

export interface UiQuestion {
  question_id: number;
  code: string;
  description: string;
  snippet_label: string;
  snippet_text: string;
  existing_judgment?: Judgment | null;
}

export interface Progress {
  annotator_id: string;
  answered: number;
  total: number;
  tallies: Record<Judgment, number>;
  answered_keys: [number, string][];
}

export interface JudgmentBody {
  annotator_id: string;
  question_id: number;
  snippet_label: string;
  judgment: Judgment;
}

export interface Transport {
  fetchQuestions(annotator: string): Promise<UiQuestion[]>;
  postJudgment(body: JudgmentBody): Promise<void>;
  fetchProgress(annotator: string): Promise<Progress>;
}

/** Talks to the annotation service's JSON API; same origin by default. */
export class HttpTransport implements Transport {
  constructor(private readonly base: string = "") {}

  async fetchQuestions(annotator: string): Promise<UiQuestion[]> {
    const resp = await fetch(
      `${this.base}/api/questions?annotator=${encodeURIComponent(annotator)}`,
    );
    if (!resp.ok) throw new Error(`questions fetch failed: ${resp.status}`);
    return (await resp.json()) as UiQuestion[];
  }

  async postJudgment(body: JudgmentBody): Promise<void> {
    const resp = await fetch(`${this.base}/api/judgment`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      let reason = `status ${resp.status}`;
      try {
        const payload = (await resp.json()) as { error?: string };
        if (payload.error) reason = payload.error;
      } catch {
        /* body was not JSON; keep the status text */
      }
      throw new Error(`judgment rejected: ${reason}`);
    }
  }

  async fetchProgress(annotator: string): Promise<Progress> {
    const resp = await fetch(
      `${this.base}/api/progress?annotator=${encodeURIComponent(annotator)}`,
    );
    if (!resp.ok) throw new Error(`progress fetch failed: ${resp.status}`);
    return (await resp.json()) as Progress;
  }
}

const itemKey = (q: { question_id: number; snippet_label: string }): string =>
  `${q.question_id}:${q.snippet_label}`;

/**
 * The annotator's working state: questions in (question_id, label) order,
 * one current item at a time, submissions that fail stay in a retry slot
 * instead of being dropped.
 */
export class JudgmentQueue {
  items: UiQuestion[] = [];
  answered = new Map<string, Judgment>();
  pendingRetry: JudgmentBody | null = null;
  lastError: string | null = null;

  constructor(
    private readonly transport: Transport,
    readonly annotator: string,
  ) {}

  async load(): Promise<void> {
    const questions = await this.transport.fetchQuestions(this.annotator);
    this.items = [...questions].sort(
      (a, b) =>
        a.question_id - b.question_id ||
        a.snippet_label.localeCompare(b.snippet_label),
    );
    this.answered.clear();
    for (const q of this.items) {
      if (q.existing_judgment) {
        this.answered.set(itemKey(q), q.existing_judgment);
      }
    }
  }

  get total(): number {
    return this.items.length;
  }

  get answeredCount(): number {
    return this.answered.size;
  }

  get done(): boolean {
    return this.items.length > 0 && this.answered.size === this.items.length;
  }

  /** First unanswered question, in sheet order. */
  current(): UiQuestion | null {
    for (const q of this.items) {
      if (!this.answered.has(itemKey(q))) return q;
    }
    return null;
  }

  tallies(): Record<Judgment, number> {
    const out: Record<Judgment, number> = { HI: 0, I: 0, IR: 0 };
    for (const j of this.answered.values()) out[j] += 1;
    return out;
  }

  /**
   * Submit a judgment for the current question. On success the queue
   * advances; on failure the judgment is parked for retry and the queue
   * stays put so nothing is silently lost.
   */
  async judge(judgment: Judgment): Promise<boolean> {
    const q = this.current();
    if (!q) return false;
    const body: JudgmentBody = {
      annotator_id: this.annotator,
      question_id: q.question_id,
      snippet_label: q.snippet_label,
      judgment,
    };
    return this.submit(body);
  }

  /** Retry whatever failed last; no-op when nothing is parked. */
  async retry(): Promise<boolean> {
    if (!this.pendingRetry) return true;
    return this.submit(this.pendingRetry);
  }

  private async submit(body: JudgmentBody): Promise<boolean> {
    try {
      await this.transport.postJudgment(body);
    } catch (err) {
      this.pendingRetry = body;
      this.lastError = err instanceof Error ? err.message : String(err);
      return false;
    }
    this.answered.set(itemKey(body), body.judgment);
    this.pendingRetry = null;
    this.lastError = null;
    return true;
  }
}
