/**
 * DOM shell over the judgment queue: one blinded snippet per screen,
 * three buttons (keyboard 1/2/3), a progress header, a retry banner for
 * failed submissions, and a completion view with the export hint.
 */

import {
  HttpTransport,
  Judgment,
  JUDGMENT_LABELS,
  JUDGMENTS,
  JudgmentQueue,
  KEY_TO_JUDGMENT,
} from "./core.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class AnnotatorApp {
  private queue: JudgmentQueue;
  private root: HTMLElement;

  constructor(root: HTMLElement, queue: JudgmentQueue) {
    this.root = root;
    this.queue = queue;
  }

  static async boot(root: HTMLElement): Promise<AnnotatorApp> {
    let annotator = window.localStorage.getItem("annotator_id");
    if (!annotator) {
      annotator = window.prompt("Annotator id:")?.trim() || "";
      if (annotator) window.localStorage.setItem("annotator_id", annotator);
    }
    if (!annotator) {
      root.textContent = "An annotator id is required; reload to try again.";
      throw new Error("no annotator id");
    }
    const queue = new JudgmentQueue(new HttpTransport(), annotator);
    await queue.load();
    const app = new AnnotatorApp(root, queue);
    app.render();
    app.bindKeys();
    return app;
  }

  bindKeys(): void {
    document.addEventListener("keydown", (event) => {
      const judgment = KEY_TO_JUDGMENT[event.key];
      if (judgment && this.queue.current()) {
        void this.handleJudgment(judgment);
      }
    });
  }

  async handleJudgment(judgment: Judgment): Promise<void> {
    const ok = this.queue.pendingRetry
      ? await this.queue.retry()
      : await this.queue.judge(judgment);
    this.render();
    if (!ok) return;
  }

  async handleRetry(): Promise<void> {
    await this.queue.retry();
    this.render();
  }

  render(): void {
    this.root.replaceChildren();
    this.root.appendChild(this.renderHeader());
    if (this.queue.pendingRetry) {
      this.root.appendChild(this.renderBanner());
    }
    const q = this.queue.current();
    if (q) {
      this.root.appendChild(this.renderQuestion(q));
    } else {
      this.root.appendChild(this.renderDone());
    }
  }

  private renderHeader(): HTMLElement {
    const header = el("header", "progress");
    header.appendChild(
      el("span", "count", `${this.queue.answeredCount} / ${this.queue.total}`),
    );
    const tallies = this.queue.tallies();
    header.appendChild(
      el(
        "span",
        "tallies",
        JUDGMENTS.map((j) => `${JUDGMENT_LABELS[j]}: ${tallies[j]}`).join("  "),
      ),
    );
    return header;
  }

  private renderBanner(): HTMLElement {
    const banner = el("div", "banner");
    banner.setAttribute("role", "alert");
    banner.appendChild(
      el("span", "banner-text",
        `Submission failed (${this.queue.lastError ?? "network error"}); nothing was lost.`),
    );
    const retry = el("button", "retry", "Retry");
    retry.addEventListener("click", () => void this.handleRetry());
    banner.appendChild(retry);
    return banner;
  }

  private renderQuestion(q: {
    question_id: number;
    code: string;
    description: string;
    snippet_label: string;
    snippet_text: string;
  }): HTMLElement {
    const card = el("main", "question");
    card.appendChild(
      el("h2", "code", `Question ${q.question_id} — snippet ${q.snippet_label}`),
    );
    card.appendChild(el("p", "description", `${q.code}: ${q.description}`));
    card.appendChild(el("blockquote", "snippet", q.snippet_text));
    const buttons = el("div", "buttons");
    JUDGMENTS.forEach((judgment, i) => {
      const button = el("button", `judge judge-${judgment.toLowerCase()}`,
        `${i + 1} — ${JUDGMENT_LABELS[judgment]}`);
      button.dataset.judgment = judgment;
      button.addEventListener("click", () => void this.handleJudgment(judgment));
      buttons.appendChild(button);
    });
    card.appendChild(buttons);
    return card;
  }

  private renderDone(): HTMLElement {
    const done = el("main", "done");
    done.appendChild(el("h2", undefined, "All snippets judged."));
    done.appendChild(
      el("p", undefined,
        "Your judgments are stored server-side; the full log is available at /api/export."),
    );
    return done;
  }
}

declare global {
  interface Window {
    annotatorApp?: AnnotatorApp;
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  void AnnotatorApp.boot(document.getElementById("app") as HTMLElement).then(
    (app) => {
      window.annotatorApp = app;
    },
  );
}
