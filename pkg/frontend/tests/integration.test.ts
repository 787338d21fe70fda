/**
 * Round trip against the real annotation service: a scripted browser
 * session answers a 3-question sheet through the DOM, the exported CSV is
 * ingested by the backend's `agree` command, and the resulting agreement
 * report must equal one computed from a hand-written CSV of the same
 * judgments. No rendered view may contain a model identifier.
 *
 * The happy-dom window is pinned to the service origin below so the
 * same-origin policy lets the session through.
 *
 * @vitest-environment happy-dom
 * @vitest-environment-options { "url": "http://127.0.0.1:18731" }
 */

import { execFile, spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, writeFileSync, readFileSync, existsSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { promisify } from "node:util";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { HttpTransport, Judgment, JudgmentQueue } from "../src/core.js";
import { AnnotatorApp } from "../src/app.js";

const execFileP = promisify(execFile);

const FRONTEND_ROOT = resolve(__dirname, "..");
const PORT = 18731; // must match the @vitest-environment-options url above
const BASE = `http://127.0.0.1:${PORT}`;

const SHEET_CSV = `question_id,code,description,snippet_label,snippet_text
1,c000,condition trg000,A,noise trg000 in context here
1,c000,condition trg000,B,unrelated words entirely
2,c001,condition trg001,A,vague mention of something
2,c001,condition trg001,B,clear trg001 evidence span
3,c002,condition trg002,A,trg002 appears plainly
3,c002,condition trg002,B,more filler text tokens
`;

const BLIND_CSV = `question_id,snippet_label,model
1,A,ATTN
1,B,KD
2,A,KD
2,B,ATTN
3,A,ATTN
3,B,KD
`;

// the scripted session will submit these, in sheet order (qid, label)
const SESSION: Judgment[] = ["HI", "IR", "I", "HI", "HI", "IR"];

let workdir: string;
let server: ChildProcess | null = null;
let serverLog = "";

async function waitForServer(): Promise<void> {
  const deadline = Date.now() + 15000;
  while (Date.now() < deadline) {
    try {
      const resp = await fetch(`${BASE}/api/questions`);
      if (resp.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 150));
  }
  throw new Error(`annotation service never came up on ${BASE}\n${serverLog}`);
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "xrac-ui-test-"));
  writeFileSync(join(workdir, "sheet.csv"), SHEET_CSV);
  writeFileSync(join(workdir, "blind.csv"), BLIND_CSV);

  // build the bundle so the service serves the real static assets
  await execFileP("tsc", [], { cwd: FRONTEND_ROOT });
  await execFileP("node", ["scripts/copy-static.mjs"], { cwd: FRONTEND_ROOT });

  server = spawn(
    "python3",
    [
      "-m", "xrac.cli", "serve",
      "--sheet", join(workdir, "sheet.csv"),
      "--store", join(workdir, "store.csv"),
      "--bind", `127.0.0.1:${PORT}`,
      "--ui", join(FRONTEND_ROOT, "dist"),
    ],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  server.stdout?.on("data", (d) => (serverLog += d));
  server.stderr?.on("data", (d) => (serverLog += d));
  await waitForServer();
});

afterAll(() => {
  server?.kill();
});

describe("annotation UI round trip", () => {
  it("answers the whole sheet through the DOM and exports it faithfully", async () => {
    const root = document.createElement("div");
    root.id = "app";
    document.body.appendChild(root);

    const queue = new JudgmentQueue(new HttpTransport(BASE), "session1");
    await queue.load();
    expect(queue.total).toBe(6); // 3 questions x labels A,B

    const app = new AnnotatorApp(root, queue);
    app.render();

    const seenViews: string[] = [];
    for (const judgment of SESSION) {
      seenViews.push(root.innerHTML);
      const button = root.querySelector(
        `button[data-judgment="${judgment}"]`,
      ) as HTMLButtonElement | null;
      expect(button).not.toBeNull();
      button!.click();
      // the click handler posts asynchronously; wait for the queue to move on
      const before = queue.answeredCount;
      const deadline = Date.now() + 5000;
      while (queue.answeredCount === before && Date.now() < deadline) {
        await new Promise((r) => setTimeout(r, 20));
      }
      expect(queue.answeredCount).toBe(before + 1);
      app.render();
    }
    seenViews.push(root.innerHTML);

    // completion view with the export hint
    expect(root.textContent).toContain("All snippets judged");
    expect(root.textContent).toContain("/api/export");
    expect(root.querySelector(".count")?.textContent).toBe("6 / 6");

    // blinding: no rendered view ever names a model
    for (const view of seenViews) {
      expect(view).not.toContain("ATTN");
      expect(view).not.toContain("KD");
    }

    // server-side progress agrees with the session
    const resp = await fetch(`${BASE}/api/progress?annotator=session1`);
    const prog = await resp.json();
    expect(prog.answered).toBe(6);
    expect(prog.tallies).toEqual({ HI: 3, I: 1, IR: 2 });
  });

  it("export ingests cleanly and matches a hand-written CSV of the judgments", async () => {
    const exportResp = await fetch(`${BASE}/api/export`);
    expect(exportResp.ok).toBe(true);
    const exported = await exportResp.text();
    writeFileSync(join(workdir, "exported.csv"), exported);

    // the same six judgments, written by hand
    const keys: [number, string][] = [[1, "A"], [1, "B"], [2, "A"], [2, "B"], [3, "A"], [3, "B"]];
    const handRows = keys.map(
      ([qid, label], i) => `session1,${qid},${label},${SESSION[i]}`,
    );
    writeFileSync(
      join(workdir, "hand.csv"),
      "annotator_id,question_id,snippet_label,judgment\n" + handRows.join("\n") + "\n",
    );

    const agree = async (file: string) => {
      const { stdout } = await execFileP("python3", [
        "-m", "xrac.cli", "--json", "agree",
        "--sheet", join(workdir, "sheet.csv"),
        "--blind", join(workdir, "blind.csv"),
        "--group-a", join(workdir, file),
      ]);
      return JSON.parse(stdout);
    };

    const fromExport = await agree("exported.csv");
    const fromHand = await agree("hand.csv");
    expect(fromExport.rejected_rows).toEqual([]);
    expect(fromExport.models).toEqual(fromHand.models);

    // sanity: the report actually unblinded something
    const models = Object.keys(fromExport.models).sort();
    expect(models).toEqual(["ATTN", "KD"]);
  });

  it("serves static assets that never name the models", async () => {
    for (const path of ["/", "/app.js", "/core.js", "/style.css"]) {
      const resp = await fetch(`${BASE}${path}`);
      expect(resp.ok).toBe(true);
      const text = await resp.text();
      expect(text).not.toContain("ATTN");
      expect(text).not.toContain("KD");
    }
    expect(existsSync(join(FRONTEND_ROOT, "dist", "index.html"))).toBe(true);
  });

  it("questions payload hides the blind map", async () => {
    const resp = await fetch(`${BASE}/api/questions`);
    const text = await resp.text();
    expect(text).not.toContain("ATTN");
    expect(text).not.toContain("KD");
    const rows = JSON.parse(text);
    expect(rows).toHaveLength(6);
    for (const row of rows) {
      expect(Object.keys(row).sort()).toEqual(
        ["code", "description", "question_id", "snippet_label", "snippet_text"],
      );
    }
  });
});
