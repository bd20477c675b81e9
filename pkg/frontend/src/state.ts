/** Session view state and the mutation discipline around it.
 *
 * Exactly one polarity is active, exactly one mutation may be in flight,
 * and the rendered state never regresses to a revision older than the last
 * acknowledged mutation. On a revision conflict the controller silently
 * refetches and reports `conflict` so the UI can prompt a retry.
 */

import { ApiClient, ConflictError } from './api.js';
import type { Polarity, SessionPayload } from './types.js';

export interface ViewState {
  sessionId: string | null;
  selectedImage: string | null;
  polarity: Polarity;
  overlayOpacity: number;
  pending: boolean;
  lastRevision: number;
  session: SessionPayload | null;
}

export type ClickOutcome = 'applied' | 'ignored-pending' | 'conflict' | 'rejected';

export function initialState(): ViewState {
  return {
    sessionId: null,
    selectedImage: null,
    polarity: 'positive',
    overlayOpacity: 0.5,
    pending: false,
    lastRevision: -1,
    session: null,
  };
}

export class SessionController {
  readonly state: ViewState = initialState();
  private listeners: Array<(s: ViewState) => void> = [];

  constructor(private api: ApiClient) {}

  onChange(listener: (s: ViewState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const l of this.listeners) l(this.state);
  }

  private accept(session: SessionPayload): void {
    // Never display a payload older than what we already acknowledged.
    if (session.revision < this.state.lastRevision) return;
    this.state.session = session;
    this.state.lastRevision = session.revision;
    this.state.sessionId = session.id;
    if (
      this.state.selectedImage === null ||
      !this.findEntry(this.state.selectedImage)
    ) {
      this.state.selectedImage = session.supports[0]?.image_id ?? null;
    }
    this.emit();
  }

  findEntry(imageId: string) {
    const s = this.state.session;
    if (!s) return undefined;
    return [...s.supports, ...s.queries].find((e) => e.image_id === imageId);
  }

  isSupport(imageId: string): boolean {
    return !!this.state.session?.supports.some((e) => e.image_id === imageId);
  }

  togglePolarity(): void {
    this.state.polarity = this.state.polarity === 'positive' ? 'negative' : 'positive';
    this.emit();
  }

  setOpacity(value: number): void {
    this.state.overlayOpacity = Math.min(1, Math.max(0, value));
    this.emit();
  }

  selectImage(imageId: string): void {
    if (this.findEntry(imageId)) {
      this.state.selectedImage = imageId;
      this.emit();
    }
  }

  async createSession(body: Parameters<ApiClient['createSession']>[0]): Promise<void> {
    const session = await this.api.createSession(body);
    this.state.lastRevision = -1;
    this.accept(session);
  }

  async refresh(): Promise<void> {
    if (!this.state.sessionId) return;
    this.accept(await this.api.getSession(this.state.sessionId));
  }

  /** Place a click on the selected support image at image pixel (row, col). */
  async placeClick(row: number, col: number): Promise<ClickOutcome> {
    const { sessionId, selectedImage, pending } = this.state;
    if (!sessionId || !selectedImage) return 'rejected';
    if (pending) return 'ignored-pending';
    if (!this.isSupport(selectedImage)) return 'rejected';
    const entry = this.findEntry(selectedImage)!;
    if (row < 0 || col < 0 || row >= entry.height || col >= entry.width) {
      return 'rejected';
    }
    this.state.pending = true;
    this.emit();
    try {
      const session = await this.api.addClick(
        sessionId, selectedImage, row, col, this.state.polarity,
        this.state.lastRevision,
      );
      this.accept(session);
      return 'applied';
    } catch (err) {
      if (err instanceof ConflictError) {
        await this.refresh();
        return 'conflict';
      }
      throw err;
    } finally {
      this.state.pending = false;
      this.emit();
    }
  }

  /** Move a query image into the support set. */
  async promote(imageId: string): Promise<ClickOutcome> {
    const { sessionId, pending } = this.state;
    if (!sessionId) return 'rejected';
    if (pending) return 'ignored-pending';
    if (this.isSupport(imageId)) return 'rejected';
    this.state.pending = true;
    this.emit();
    try {
      const session = await this.api.promote(sessionId, imageId, this.state.lastRevision);
      this.accept(session);
      return 'applied';
    } catch (err) {
      if (err instanceof ConflictError) {
        await this.refresh();
        return 'conflict';
      }
      throw err;
    } finally {
      this.state.pending = false;
      this.emit();
    }
  }
}
