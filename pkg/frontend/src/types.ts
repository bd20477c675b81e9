/** Wire types of the annotation service (HTTP+JSON). */

export type Polarity = 'positive' | 'negative';

export interface ClickRecord {
  row: number;
  col: number;
  polarity: Polarity;
  order: number;
}

export interface EntryPayload {
  image_id: string;
  role: 'support' | 'query';
  height: number;
  width: number;
  clicks: ClickRecord[];
  mask_png_b64: string | null;
  iou?: number;
}

export interface SessionPayload {
  id: string;
  revision: number;
  checkpoint_version: string;
  created_at: number;
  updated_at: number;
  supports: EntryPayload[];
  queries: EntryPayload[];
}

export interface CreateSessionRequest {
  images: Array<{ id: string; png_b64?: string }>;
  support_ids: string[];
  gt_masks?: Record<string, string>;
}
