/**
 * Progress-stream consumption with reconnect.
 *
 * The service streams newline-delimited JSON: one record per optimization
 * step, then a single terminal record. Reconnecting clients receive the full
 * backlog again, so the watcher deduplicates by step index; rendered indices
 * are therefore gap-free and strictly increasing no matter how many times the
 * connection drops.
 */

import { isFinalRecord, type JobFinal, type ProgressRecord, type StepRecord } from "./types.js";

export class StreamGapError extends Error {}

/** Incremental NDJSON splitter: feed chunks, get parsed records. */
export class NdjsonParser {
  private buffer = "";

  push(chunk: string): ProgressRecord[] {
    this.buffer += chunk;
    const lines = this.buffer.split("\n");
    this.buffer = lines.pop() ?? "";
    return lines
      .map((line) => line.trim())
      .filter((line) => line.length > 0)
      .map((line) => JSON.parse(line) as ProgressRecord);
  }

  flush(): ProgressRecord[] {
    const rest = this.buffer.trim();
    this.buffer = "";
    return rest ? [JSON.parse(rest) as ProgressRecord] : [];
  }
}

export interface WatcherHooks {
  onStep?: (record: StepRecord) => void;
  onFinal?: (final: JobFinal) => void;
}

export class JobWatcher {
  lastRendered = -1;
  renderedSteps: number[] = [];
  final: JobFinal | null = null;
  private hooks: WatcherHooks;

  constructor(hooks: WatcherHooks = {}) {
    this.hooks = hooks;
  }

  get finished(): boolean {
    return this.final !== null;
  }

  /** Route one record; replayed backlog entries are skipped, gaps throw. */
  handle(record: ProgressRecord): "rendered" | "duplicate" | "final" {
    if (isFinalRecord(record)) {
      this.final = record.final;
      this.hooks.onFinal?.(record.final);
      return "final";
    }
    if (record.step <= this.lastRendered) {
      return "duplicate";
    }
    if (record.step !== this.lastRendered + 1) {
      throw new StreamGapError(
        `progress gap: expected step ${this.lastRendered + 1}, got ${record.step}`
      );
    }
    this.lastRendered = record.step;
    this.renderedSteps.push(record.step);
    this.hooks.onStep?.(record);
    return "rendered";
  }

  /** Drain one connection; resolves true if the terminal record arrived. */
  async consume(source: AsyncIterable<string>): Promise<boolean> {
    const parser = new NdjsonParser();
    for await (const chunk of source) {
      for (const record of parser.push(chunk)) {
        this.handle(record);
        if (this.finished) {
          return true;
        }
      }
    }
    for (const record of parser.flush()) {
      this.handle(record);
    }
    return this.finished;
  }

  /**
   * Consume with reconnection: when a connection drops before the terminal
   * record, open a fresh one (the server replays the backlog first).
   */
  async watch(
    connect: () => Promise<AsyncIterable<string>>,
    maxRetries = 5
  ): Promise<JobFinal> {
    let attempts = 0;
    while (!this.finished) {
      let dropped: unknown = null;
      try {
        if (await this.consume(await connect())) {
          break;
        }
      } catch (err) {
        if (err instanceof StreamGapError) {
          throw err;
        }
        dropped = err;
      }
      attempts += 1;
      if (attempts > maxRetries) {
        throw dropped instanceof Error
          ? dropped
          : new Error("progress stream ended without a terminal record");
      }
    }
    return this.final!;
  }
}
