import { describe, expect, it } from "vitest";

import { encodeFrame } from "../src/protocol.js";
import {
  ConsoleState,
  TimelineEvent,
  applyEvent,
  initialState,
  replay,
} from "../src/state.js";

function frame(fill: number) {
  return encodeFrame({
    shape: [2, 2, 3],
    data: new Float32Array(12).fill(fill),
  });
}

function inbound(kind: string, seq: number, payload: object): TimelineEvent {
  return { dir: "in", msg: { kind, seq, payload } } as TimelineEvent;
}

describe("ordering rule", () => {
  it("discards a frame_update with a lower sequence number", () => {
    let s = initialState();
    s = applyEvent(
      s,
      inbound("frame_update", 7, { step: 70, views: { global: frame(0.7) } }),
    );
    s = applyEvent(
      s,
      inbound("frame_update", 5, { step: 50, views: { global: frame(0.5) } }),
    );
    expect(s.frameStep).toBe(70);
    expect(s.frames["global"]?.data[0]).toBeCloseTo(0.7);
    expect(s.lastSeq).toBe(7);
  });
});

describe("panel rules", () => {
  it("fills the subgoal panel on subgoal_preview", () => {
    const s = applyEvent(
      initialState(),
      inbound("subgoal_preview", 1, { views: { global: frame(0.3) } }),
    );
    expect(s.subgoal).not.toBeNull();
    expect(s.subgoal?.["global"]?.shape).toEqual([2, 2, 3]);
  });

  it("puts the progress bar at 50% for progress_update 0.5", () => {
    const s = applyEvent(
      initialState(),
      inbound("progress_update", 1, { step: 12, progress: 0.5 }),
    );
    expect(s.progress).toBe(0.5);
    expect(s.step).toBe(12);
  });

  it("tracks subtask and context version from state_update", () => {
    const s = applyEvent(
      initialState(),
      inbound("state_update", 2, {
        step: 4,
        progress: 0,
        subtask: "pick up the red block",
        context_version: 3,
      }),
    );
    expect(s.subtask).toBe("pick up the red block");
    expect(s.contextVersion).toBe(3);
  });

  it("marks the episode done when a status arrives", () => {
    const s = applyEvent(
      initialState(),
      inbound("state_update", 2, {
        step: 40,
        progress: 1,
        subtask: null,
        context_version: -1,
        status: "done",
      }),
    );
    expect(s.lifecycle).toBe("done");
    expect(s.status).toBe("done");
    expect(s.readOnly).toBe(true);
  });
});

describe("instruction flow", () => {
  it("queues on send, resolves to the active subtask on ack", () => {
    let s = initialState();
    const out: TimelineEvent = {
      dir: "out",
      msg: { kind: "instruction", seq: 2, payload: { text: "open the container" } },
    };
    s = applyEvent({ ...s, lifecycle: "running" }, out);
    expect(s.pending).toEqual([{ seq: 2, text: "open the container" }]);
    s = applyEvent(
      s,
      inbound("ack", 9, { of: 2, step: 17, text: "open the container" }),
    );
    expect(s.pending).toEqual([]);
    expect(s.subtask).toBe("open the container");
    expect(s.activeInstruction).toBe("open the container");
  });

  it("keeps two unacked instructions queued in send order", () => {
    let s: ConsoleState = { ...initialState(), lifecycle: "running" };
    for (const [seq, text] of [
      [2, "first"],
      [3, "second"],
    ] as const) {
      s = applyEvent(s, {
        dir: "out",
        msg: { kind: "instruction", seq, payload: { text } },
      });
    }
    expect(s.pending.map((p) => p.seq)).toEqual([2, 3]);
    s = applyEvent(s, inbound("ack", 5, { of: 2, step: 1, text: "first" }));
    expect(s.pending.map((p) => p.text)).toEqual(["second"]);
  });

  it("drops a pending instruction the server rejects", () => {
    let s: ConsoleState = { ...initialState(), lifecycle: "running" };
    s = applyEvent(s, {
      dir: "out",
      msg: { kind: "instruction", seq: 2, payload: { text: "late" } },
    });
    s = applyEvent(s, inbound("error", 4, { of: 2, message: "episode stopped" }));
    expect(s.pending).toEqual([]);
    expect(s.banner).toBe("episode stopped");
  });
});

describe("hello and errors", () => {
  it("stores the vocabulary from the hello ack", () => {
    const s = applyEvent(
      initialState(),
      inbound("ack", 0, {
        of: 0,
        protocol: "flowsteer-console/1",
        vocabulary: ["pick up the red block", "done"],
      }),
    );
    expect(s.connection).toBe("connected");
    expect(s.vocabulary).toContain("done");
  });

  it("goes read-only on a protocol refusal", () => {
    const s = applyEvent(
      initialState(),
      inbound("error", 0, {
        message: "protocol mismatch",
        expected: "flowsteer-console/1",
      }),
    );
    expect(s.readOnly).toBe(true);
    expect(s.banner).toMatch(/protocol mismatch/);
  });
});

describe("replay reproducibility", () => {
  it("folding the same timeline twice yields identical state", () => {
    const events: TimelineEvent[] = [
      { dir: "link", connection: "connecting" },
      {
        dir: "out",
        msg: { kind: "hello", seq: 0, payload: { protocol: "flowsteer-console/1" } },
      },
      inbound("ack", 0, { of: 0, protocol: "flowsteer-console/1", vocabulary: [] }),
      { dir: "out", msg: { kind: "start_episode", seq: 1, payload: {} } },
      inbound("ack", 1, { of: 1 }),
      inbound("frame_update", 2, { step: 0, views: { global: frame(0.2) } }),
      {
        dir: "out",
        msg: { kind: "instruction", seq: 2, payload: { text: "go" } },
      },
      inbound("ack", 3, { of: 2, step: 5, text: "go" }),
      inbound("progress_update", 4, { step: 9, progress: 0.5 }),
      inbound("state_update", 5, {
        step: 40,
        progress: 1,
        subtask: null,
        context_version: -1,
        status: "done",
      }),
    ];
    const a = replay(events);
    const b = replay(events);
    expect(a).toEqual(b);
    expect(a.lifecycle).toBe("done");
    expect(a.subtask).toBe(null);
    expect(a.activeInstruction).toBe("go");
    expect(a.progress).toBe(1);
  });
});
