/** Browser wiring: panels, canvas rendering and input handling.
 *
 * All pixel math lives in coords.ts / overlay.ts; this module only moves
 * data between the DOM and the controller.
 */

import { ApiClient } from './api.js';
import { clientToImage } from './coords.js';
import { compositeOverlay, drawClickDots, maskBitsFromGray } from './overlay.js';
import { SessionController } from './state.js';
import type { EntryPayload } from './types.js';

const imageCache = new Map<string, HTMLImageElement>();

function loadImage(src: string): Promise<HTMLImageElement> {
  const hit = imageCache.get(src);
  if (hit) return Promise.resolve(hit);
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => {
      imageCache.set(src, img);
      resolve(img);
    };
    img.onerror = () => reject(new Error(`failed to load ${src}`));
    img.src = src;
  });
}

function toImageData(buf: { width: number; height: number; data: Uint8ClampedArray }): ImageData {
  const out = new ImageData(buf.width, buf.height);
  out.data.set(buf.data);
  return out;
}

async function maskBits(entry: EntryPayload): Promise<Uint8Array | null> {
  if (!entry.mask_png_b64) return null;
  const img = await loadImage(`data:image/png;base64,${entry.mask_png_b64}`);
  const canvas = document.createElement('canvas');
  canvas.width = entry.width;
  canvas.height = entry.height;
  const ctx = canvas.getContext('2d')!;
  ctx.drawImage(img, 0, 0);
  const rgba = ctx.getImageData(0, 0, entry.width, entry.height);
  const gray = new Uint8Array(entry.width * entry.height);
  for (let p = 0; p < gray.length; p++) gray[p] = rgba.data[p * 4];
  return maskBitsFromGray(gray);
}

export class App {
  private controller: SessionController;
  private corpusUrl: (id: string) => string;

  constructor(baseUrl: string, root: HTMLElement) {
    this.controller = new SessionController(new ApiClient(baseUrl));
    this.corpusUrl = (id) =>
      `${baseUrl}/sessions/${this.controller.state.sessionId}/images/${id}`;
    this.buildLayout(root);
    this.controller.onChange(() => void this.render());
    document.addEventListener('keydown', (e) => {
      if (e.key === 'p') this.controller.togglePolarity();
    });
  }

  private el<K extends keyof HTMLElementTagNameMap>(
    tag: K, cls: string, parent: HTMLElement,
  ): HTMLElementTagNameMap[K] {
    const node = document.createElement(tag);
    node.className = cls;
    parent.appendChild(node);
    return node;
  }

  private canvas!: HTMLCanvasElement;
  private supportPanel!: HTMLElement;
  private queryPanel!: HTMLElement;
  private statusBar!: HTMLElement;
  private polarityButton!: HTMLButtonElement;
  private opacitySlider!: HTMLInputElement;

  private buildLayout(root: HTMLElement): void {
    const toolbar = this.el('div', 'toolbar', root);
    this.polarityButton = this.el('button', 'polarity', toolbar);
    this.polarityButton.onclick = () => this.controller.togglePolarity();
    this.opacitySlider = this.el('input', 'opacity', toolbar);
    this.opacitySlider.type = 'range';
    this.opacitySlider.min = '0';
    this.opacitySlider.max = '100';
    this.opacitySlider.value = '50';
    this.opacitySlider.oninput = () =>
      this.controller.setOpacity(Number(this.opacitySlider.value) / 100);
    this.statusBar = this.el('span', 'status', toolbar);

    const main = this.el('div', 'main', root);
    this.canvas = this.el('canvas', 'viewer', main);
    this.canvas.onclick = (e) => void this.handleCanvasClick(e);
    const side = this.el('div', 'side', main);
    this.el('h3', '', side).textContent = 'Support';
    this.supportPanel = this.el('div', 'panel support-panel', side);
    this.el('h3', '', side).textContent = 'Query';
    this.queryPanel = this.el('div', 'panel query-panel', side);
  }

  async open(sessionId: string): Promise<void> {
    this.controller.state.sessionId = sessionId;
    await this.controller.refresh();
  }

  private async handleCanvasClick(e: MouseEvent): Promise<void> {
    const state = this.controller.state;
    const entry = state.selectedImage
      ? this.controller.findEntry(state.selectedImage)
      : undefined;
    if (!entry || state.pending) return;
    const pos = clientToImage(
      e.clientX, e.clientY, this.canvas.getBoundingClientRect(),
      entry.width, entry.height,
    );
    if (!pos) return;
    const outcome = await this.controller.placeClick(pos.row, pos.col);
    if (outcome === 'conflict') {
      this.statusBar.textContent = 'Session changed elsewhere; refreshed. Click again.';
    } else if (outcome === 'rejected') {
      this.statusBar.textContent = 'Clicks land on support images only.';
    }
  }

  private async render(): Promise<void> {
    const state = this.controller.state;
    this.polarityButton.textContent =
      state.polarity === 'positive' ? '+ positive (p)' : '- negative (p)';
    this.polarityButton.classList.toggle('negative', state.polarity === 'negative');
    document.body.classList.toggle('pending', state.pending);
    if (!state.session) return;

    await Promise.all([
      this.renderPanel(this.supportPanel, state.session.supports, false),
      this.renderPanel(this.queryPanel, state.session.queries, true),
    ]);
    const entry = state.selectedImage
      ? this.controller.findEntry(state.selectedImage)
      : undefined;
    if (entry) await this.renderViewer(entry);
  }

  private async renderViewer(entry: EntryPayload): Promise<void> {
    const img = await loadImage(this.corpusUrl(entry.image_id));
    this.canvas.width = entry.width;
    this.canvas.height = entry.height;
    const ctx = this.canvas.getContext('2d')!;
    ctx.drawImage(img, 0, 0, entry.width, entry.height);
    const bits = await maskBits(entry);
    let buffer = ctx.getImageData(0, 0, entry.width, entry.height);
    if (bits) {
      const composited = compositeOverlay(
        buffer, bits, this.controller.state.overlayOpacity,
      );
      buffer = toImageData(composited);
    }
    const dotted = drawClickDots(buffer, entry.clicks);
    ctx.putImageData(toImageData(dotted), 0, 0);
  }

  private async renderPanel(
    panel: HTMLElement, entries: EntryPayload[], promotable: boolean,
  ): Promise<void> {
    panel.textContent = '';
    for (const entry of entries) {
      const tile = this.el('div', 'tile', panel);
      tile.dataset.imageId = entry.image_id;
      const thumb = this.el('canvas', 'thumb', tile);
      tile.onclick = () => this.controller.selectImage(entry.image_id);
      const caption = this.el('div', 'caption', tile);
      caption.textContent =
        entry.iou !== undefined
          ? `${entry.image_id} IoU ${(entry.iou * 100).toFixed(1)}%`
          : entry.image_id;
      if (promotable) {
        const btn = this.el('button', 'promote', tile);
        btn.textContent = 'to support';
        btn.onclick = async (e) => {
          e.stopPropagation();
          const outcome = await this.controller.promote(entry.image_id);
          if (outcome === 'conflict') {
            this.statusBar.textContent = 'Session changed elsewhere; refreshed.';
          }
        };
      }
      await this.drawThumb(thumb, entry);
    }
  }

  private async drawThumb(canvas: HTMLCanvasElement, entry: EntryPayload): Promise<void> {
    const img = await loadImage(this.corpusUrl(entry.image_id));
    canvas.width = entry.width;
    canvas.height = entry.height;
    const ctx = canvas.getContext('2d')!;
    ctx.drawImage(img, 0, 0, entry.width, entry.height);
    const bits = await maskBits(entry);
    if (bits) {
      const buffer = ctx.getImageData(0, 0, entry.width, entry.height);
      const composited = compositeOverlay(
        buffer, bits, this.controller.state.overlayOpacity,
      );
      ctx.putImageData(toImageData(composited), 0, 0);
    }
  }
}

export function mount(baseUrl: string, rootId = 'app'): App {
  const root = document.getElementById(rootId);
  if (!root) throw new Error(`no #${rootId} element`);
  return new App(baseUrl, root);
}
