// Coalescing rate limiter: forwards the newest payload at most once per interval,
// so outbound requests never exceed ~30 Hz no matter how fast inputs arrive.

export class RateLimiter<T> {
  private pending: T | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private lastSent = -Infinity;

  constructor(
    private readonly send: (payload: T) => void,
    private readonly intervalMs = 33,
    private readonly now: () => number = () => Date.now(),
  ) {}

  submit(payload: T): void {
    this.pending = payload;
    if (this.timer !== null) return; // a flush is already scheduled
    const wait = this.lastSent + this.intervalMs - this.now();
    if (wait <= 0) {
      this.flush();
    } else {
      this.timer = setTimeout(() => this.flush(), wait);
    }
  }

  private flush(): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    if (this.pending === null) return;
    const payload = this.pending;
    this.pending = null;
    this.lastSent = this.now();
    this.send(payload);
  }

  dispose(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
    this.pending = null;
  }
}

// Exponential reconnect backoff with a cap.
export function backoffDelays(baseMs = 500, capMs = 8000): () => number {
  let attempt = 0;
  return () => {
    const delay = Math.min(capMs, baseMs * 2 ** attempt);
    attempt += 1;
    return delay;
  };
}
