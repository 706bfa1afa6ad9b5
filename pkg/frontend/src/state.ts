/**
 * Top-level UI state machine.
 *
 * idle -> annotating -> running -> reviewing, with a failed branch off
 * running. Transitions outside the table are ignored (the UI simply cannot
 * skip a stage); dispatch reports whether the event changed anything.
 */

export type UiState = "idle" | "annotating" | "running" | "reviewing" | "failed";

export type UiEvent =
  | "image-loaded"
  | "edit-started"
  | "job-done"
  | "job-failed"
  | "edit-again"
  | "reset";

export const TRANSITIONS: Record<UiState, Partial<Record<UiEvent, UiState>>> = {
  idle: { "image-loaded": "annotating" },
  annotating: { "edit-started": "running", "image-loaded": "annotating", reset: "idle" },
  running: { "job-done": "reviewing", "job-failed": "failed" },
  reviewing: { "edit-again": "annotating", "image-loaded": "annotating", reset: "idle" },
  failed: { "edit-again": "annotating", "image-loaded": "annotating", reset: "idle" },
};

export class UiStateMachine {
  state: UiState = "idle";
  history: UiState[] = ["idle"];

  /** Apply an event; illegal events leave the state untouched. */
  dispatch(event: UiEvent): boolean {
    const next = TRANSITIONS[this.state][event];
    if (next === undefined) {
      return false;
    }
    this.state = next;
    this.history.push(next);
    return true;
  }

  can(event: UiEvent): boolean {
    return TRANSITIONS[this.state][event] !== undefined;
  }
}
