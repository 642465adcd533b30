// Minimal incremental parser for a text/event-stream body. The service only
// ever sends `data:` lines and `:` keep-alive comments, so this handles
// exactly that subset: events are separated by a blank line, multi-line data
// is joined with newlines, comment lines are dropped, and a partial event at
// the end of a chunk is kept until the rest arrives.

export interface SseEvent {
  data: string;
}

export class SseParser {
  private buf = "";

  push(chunk: string): SseEvent[] {
    this.buf += chunk;
    const events: SseEvent[] = [];
    for (;;) {
      const sep = this.buf.indexOf("\n\n");
      if (sep < 0) {
        break;
      }
      const block = this.buf.slice(0, sep);
      this.buf = this.buf.slice(sep + 2);
      const data: string[] = [];
      for (const line of block.split("\n")) {
        if (line.startsWith("data:")) {
          data.push(line.slice(5).replace(/^ /, ""));
        }
        // everything else: comments, field names we don't use
      }
      if (data.length > 0) {
        events.push({ data: data.join("\n") });
      }
    }
    return events;
  }

  /** Bytes held back waiting for an event terminator. */
  pending(): number {
    return this.buf.length;
  }
}

// Reconnect schedule: quick first retry, doubling to a ceiling.
export function backoffMs(attempt: number): number {
  return Math.min(500 * 2 ** attempt, 8000);
}
