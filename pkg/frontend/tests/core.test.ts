import { beforeEach, describe, expect, it } from "vitest";

import {
  JudgmentBody,
  JudgmentQueue,
  KEY_TO_JUDGMENT,
  Transport,
  UiQuestion,
} from "../src/core.js";

function questions(n: number): UiQuestion[] {
  const out: UiQuestion[] = [];
  for (let q = 1; q <= n; q++) {
    for (const label of ["B", "A"]) {
      // deliberately unsorted
      out.push({
        question_id: q,
        code: `c${q}`,
        description: `condition ${q}`,
        snippet_label: label,
        snippet_text: `snippet ${q}${label}`,
        existing_judgment: null,
      });
    }
  }
  return out;
}

class FakeTransport implements Transport {
  posted: JudgmentBody[] = [];
  failNext = 0;
  rows: UiQuestion[];

  constructor(rows: UiQuestion[]) {
    this.rows = rows;
  }

  async fetchQuestions(): Promise<UiQuestion[]> {
    return this.rows;
  }

  async postJudgment(body: JudgmentBody): Promise<void> {
    if (this.failNext > 0) {
      this.failNext -= 1;
      throw new Error("synthetic network failure");
    }
    this.posted.push(body);
  }

  async fetchProgress() {
    return {
      annotator_id: "t",
      answered: this.posted.length,
      total: this.rows.length,
      tallies: { HI: 0, I: 0, IR: 0 },
      answered_keys: [] as [number, string][],
    };
  }
}

describe("JudgmentQueue", () => {
  let transport: FakeTransport;
  let queue: JudgmentQueue;

  beforeEach(async () => {
    transport = new FakeTransport(questions(2));
    queue = new JudgmentQueue(transport, "ann1");
    await queue.load();
  });

  it("presents 2 questions x 2 labels = 4 items in sheet order", () => {
    expect(queue.total).toBe(4);
    const first = queue.current();
    expect(first?.question_id).toBe(1);
    expect(first?.snippet_label).toBe("A");
  });

  it("maps keyboard 1/2/3 to the three judgments", () => {
    expect(KEY_TO_JUDGMENT["1"]).toBe("HI");
    expect(KEY_TO_JUDGMENT["2"]).toBe("I");
    expect(KEY_TO_JUDGMENT["3"]).toBe("IR");
  });

  it("posts the judgment for the current item and advances", async () => {
    const ok = await queue.judge("HI");
    expect(ok).toBe(true);
    expect(transport.posted).toEqual([
      { annotator_id: "ann1", question_id: 1, snippet_label: "A", judgment: "HI" },
    ]);
    expect(queue.current()?.snippet_label).toBe("B");
    expect(queue.answeredCount).toBe(1);
  });

  it("keeps the failed judgment for retry instead of dropping it", async () => {
    transport.failNext = 1;
    const ok = await queue.judge("IR");
    expect(ok).toBe(false);
    expect(queue.pendingRetry).toEqual({
      annotator_id: "ann1", question_id: 1, snippet_label: "A", judgment: "IR",
    });
    expect(queue.lastError).toContain("synthetic");
    expect(queue.current()?.snippet_label).toBe("A"); // did not advance
    expect(transport.posted).toHaveLength(0); // server store unchanged

    const retried = await queue.retry();
    expect(retried).toBe(true);
    expect(transport.posted).toHaveLength(1);
    expect(queue.pendingRetry).toBeNull();
    expect(queue.current()?.snippet_label).toBe("B");
  });

  it("resumes from server-side progress via existing judgments", async () => {
    const rows = questions(2);
    rows[0].existing_judgment = "HI"; // (1, B) in the unsorted fixture
    rows[1].existing_judgment = "I";  // (1, A)
    const t = new FakeTransport(rows);
    const resumed = new JudgmentQueue(t, "ann1");
    await resumed.load();
    expect(resumed.answeredCount).toBe(2);
    expect(resumed.current()?.question_id).toBe(2);
  });

  it("tallies sum to the answered count", async () => {
    await queue.judge("HI");
    await queue.judge("HI");
    await queue.judge("IR");
    const tallies = queue.tallies();
    expect(tallies.HI + tallies.I + tallies.IR).toBe(queue.answeredCount);
    expect(tallies).toEqual({ HI: 2, I: 0, IR: 1 });
  });

  it("reports done only when every item is judged", async () => {
    expect(queue.done).toBe(false);
    for (let i = 0; i < 4; i++) await queue.judge("I");
    expect(queue.done).toBe(true);
    expect(queue.current()).toBeNull();
  });
});
