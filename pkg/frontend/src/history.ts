/** Session history of clicks and their measurements. */

import { MeasureResponse } from "./types.js";

export interface HistoryEntry {
  sliceId: string;
  click: { x: number; y: number };
  response: MeasureResponse;
  at: number;
}

export class HistoryStore {
  private entries: HistoryEntry[] = [];
  private selectedIndex = -1;
  onChange: (() => void) | null = null;

  add(entry: HistoryEntry): number {
    this.entries.push(entry);
    this.selectedIndex = this.entries.length - 1;
    this.onChange?.();
    return this.selectedIndex;
  }

  list(): readonly HistoryEntry[] {
    return this.entries;
  }

  select(index: number): HistoryEntry | null {
    if (index < 0 || index >= this.entries.length) return null;
    this.selectedIndex = index;
    this.onChange?.();
    return this.entries[index];
  }

  selected(): HistoryEntry | null {
    return this.selectedIndex >= 0 ? this.entries[this.selectedIndex] : null;
  }

  get selection(): number {
    return this.selectedIndex;
  }
}
