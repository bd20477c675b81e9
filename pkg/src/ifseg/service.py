"""Live annotation sessions over HTTP+JSON.

A session holds support entries (clickable) and query entries (never
clicked). Every click triggers one full forward over all entries using the
carried previous masks; promoting a query moves it to the support set with
an empty click history while keeping its carried mask. Mutations carry an
expected revision; a mismatch yields a 409 and the client refetches.

Sessions are journaled as append-only event logs so a restarted service
replays them deterministically; mask snapshots amortize long replays.
"""

import base64
import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import clicks as ck
from .engine import MaskPredictor, QueryItem, SupportItem

MAX_UPLOAD_BYTES = 8 * 1024 * 1024
SNAPSHOT_EVERY = 8


class SessionError(Exception):
    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail


def encode_mask_png(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255, mode="L") \
        .save(buf, format="PNG")
    return buf.getvalue()


def decode_mask_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("L")) > 127


@dataclass
class Entry:
    image_id: str
    image: np.ndarray
    clicks: list = field(default_factory=list)
    mask: np.ndarray | None = None
    gt: np.ndarray | None = None

    def iou_if_known(self):
        if self.gt is None or self.mask is None:
            return None
        from .evaluate import iou

        return iou(self.mask, self.gt)


class Session:
    def __init__(self, session_id: str, checkpoint_version: str):
        self.id = session_id
        self.checkpoint_version = checkpoint_version
        self.revision = 0
        self.supports: list[Entry] = []
        self.queries: list[Entry] = []
        self.created_at = time.time()
        self.updated_at = self.created_at
        self.lock = threading.Lock()

    def find(self, image_id: str) -> tuple[str, Entry]:
        for e in self.supports:
            if e.image_id == image_id:
                return "support", e
        for e in self.queries:
            if e.image_id == image_id:
                return "query", e
        raise SessionError(404, f"image {image_id!r} not in session")

    def entry_json(self, entry: Entry, role: str) -> dict:
        payload = {
            "image_id": entry.image_id,
            "role": role,
            "height": int(entry.image.shape[0]),
            "width": int(entry.image.shape[1]),
            "clicks": [c.to_record() for c in entry.clicks],
            "mask_png_b64": (
                base64.b64encode(encode_mask_png(entry.mask)).decode()
                if entry.mask is not None else None
            ),
        }
        iou_val = entry.iou_if_known()
        if iou_val is not None:
            payload["iou"] = iou_val
        return payload

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "revision": self.revision,
            "checkpoint_version": self.checkpoint_version,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "supports": [self.entry_json(e, "support") for e in self.supports],
            "queries": [self.entry_json(e, "query") for e in self.queries],
        }


class SessionStore:
    """Owns sessions, inference and persistence."""

    def __init__(self, predictor: MaskPredictor, corpus_root=None, state_dir=None,
                 checkpoint_version: str = "unversioned"):
        self.predictor = predictor
        self.corpus_root = Path(corpus_root) if corpus_root else None
        self.state_dir = Path(state_dir) if state_dir else None
        self.checkpoint_version = checkpoint_version
        self.sessions: dict[str, Session] = {}
        self._store_lock = threading.Lock()
        if self.state_dir is not None:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self._restore_all()

    # -- image ingestion ---------------------------------------------------

    def _load_corpus_image(self, image_id: str) -> np.ndarray:
        if self.corpus_root is None:
            raise SessionError(400, "no corpus directory configured")
        for ext in (".png", ".jpg", ".jpeg"):
            path = self.corpus_root / f"{image_id}{ext}"
            if path.exists():
                with Image.open(path) as im:
                    return np.asarray(im.convert("RGB"))
        raise SessionError(404, f"image {image_id!r} not found in corpus")

    def _decode_upload(self, image_id: str, b64: str) -> np.ndarray:
        raw = base64.b64decode(b64)
        if len(raw) > MAX_UPLOAD_BYTES:
            raise SessionError(413, f"upload {image_id!r} exceeds size cap")
        try:
            with Image.open(io.BytesIO(raw)) as im:
                return np.asarray(im.convert("RGB"))
        except Exception:
            raise SessionError(400, f"upload {image_id!r} is not a decodable image")

    # -- session operations --------------------------------------------------

    def create_session(self, images: list[dict], support_ids: list[str],
                       gt_masks: dict | None = None,
                       session_id: str | None = None, journal: bool = True) -> Session:
        if not images:
            raise SessionError(400, "a session needs at least one image")
        ids = [spec["id"] for spec in images]
        if len(set(ids)) != len(ids):
            raise SessionError(400, "duplicate image ids")
        if not support_ids:
            raise SessionError(400, "support set must be nonempty")
        if not set(support_ids) <= set(ids):
            raise SessionError(400, "support_ids must be a subset of the images")
        session = Session(session_id or uuid.uuid4().hex, self.checkpoint_version)
        for spec in images:
            image_id = spec["id"]
            if spec.get("png_b64"):
                image = self._decode_upload(image_id, spec["png_b64"])
            else:
                image = self._load_corpus_image(image_id)
            entry = Entry(image_id=image_id, image=image)
            if gt_masks and image_id in gt_masks:
                gt = decode_mask_png(base64.b64decode(gt_masks[image_id]))
                if gt.shape != image.shape[:2]:
                    raise SessionError(400, f"gt mask shape mismatch for {image_id!r}")
                entry.gt = gt
            if image_id in support_ids:
                session.supports.append(entry)
            else:
                session.queries.append(entry)
        with self._store_lock:
            self.sessions[session.id] = session
        if journal:
            self._journal(session, {
                "event": "create",
                "images": [
                    {"id": spec["id"], "png_b64": spec.get("png_b64")}
                    for spec in images
                ],
                "support_ids": list(support_ids),
                "gt_masks": gt_masks or {},
            })
        return session

    def get_session(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise SessionError(404, f"unknown session {session_id!r}")

    def _check_revision(self, session: Session, expected) -> None:
        if expected is not None and int(expected) != session.revision:
            raise SessionError(
                409,
                f"revision conflict: expected {expected}, current {session.revision}",
            )

    def _run_forward(self, session: Session) -> None:
        supports = [
            SupportItem(image=e.image, clicks=e.clicks, prev_mask=e.mask)
            for e in session.supports
        ]
        queries = [QueryItem(image=e.image, prev_mask=e.mask) for e in session.queries]
        s_masks, q_masks = self.predictor.predict(supports, queries)
        for entry, mask in zip(session.supports, s_masks):
            entry.mask = mask
        for entry, mask in zip(session.queries, q_masks):
            entry.mask = mask

    def add_click(self, session_id: str, image_id: str, row: int, col: int,
                  polarity: str, expected_revision=None, journal: bool = True) -> Session:
        session = self.get_session(session_id)
        with session.lock:
            self._check_revision(session, expected_revision)
            role, entry = session.find(image_id)
            if role != "support":
                raise SessionError(
                    422, f"{image_id!r} is a query image; promote it before clicking"
                )
            h, w = entry.image.shape[:2]
            if not (0 <= row < h and 0 <= col < w):
                raise SessionError(422, f"click ({row}, {col}) out of bounds for {h}x{w}")
            if polarity not in (ck.POSITIVE, ck.NEGATIVE):
                raise SessionError(422, f"bad polarity {polarity!r}")
            entry.clicks.append(
                ck.Click(row=row, col=col, polarity=polarity, order=len(entry.clicks))
            )
            self._run_forward(session)
            session.revision += 1
            session.updated_at = time.time()
            if journal:
                self._journal(session, {
                    "event": "click", "image_id": image_id,
                    "row": row, "col": col, "polarity": polarity,
                })
                self._maybe_snapshot(session)
        return session

    def promote_query(self, session_id: str, image_id: str,
                      expected_revision=None, journal: bool = True) -> Session:
        session = self.get_session(session_id)
        with session.lock:
            self._check_revision(session, expected_revision)
            role, entry = session.find(image_id)
            if role != "query":
                raise SessionError(422, f"{image_id!r} is already a support entry")
            session.queries.remove(entry)
            entry.clicks = []
            session.supports.append(entry)
            session.revision += 1
            session.updated_at = time.time()
            if journal:
                self._journal(session, {"event": "promote", "image_id": image_id})
                self._maybe_snapshot(session)
        return session

    # -- persistence ---------------------------------------------------------

    def _journal_path(self, session_id: str) -> Path:
        return self.state_dir / f"{session_id}.events.jsonl"

    def _snapshot_path(self, session_id: str) -> Path:
        return self.state_dir / f"{session_id}.snapshot.npz"

    def _journal(self, session: Session, event: dict) -> None:
        if self.state_dir is None:
            return
        with self._journal_path(session.id).open("a") as fh:
            fh.write(json.dumps(event) + "\n")

    def _maybe_snapshot(self, session: Session) -> None:
        if self.state_dir is None or session.revision % SNAPSHOT_EVERY != 0:
            return
        arrays = {}
        for e in session.supports + session.queries:
            if e.mask is not None:
                arrays[f"mask_{e.image_id}"] = e.mask
        np.savez_compressed(
            self._snapshot_path(session.id),
            revision=np.array(session.revision),
            **arrays,
        )

    def _restore_all(self) -> None:
        for journal in sorted(self.state_dir.glob("*.events.jsonl")):
            session_id = journal.name[: -len(".events.jsonl")]
            events = [
                json.loads(line)
                for line in journal.read_text().splitlines()
                if line.strip()
            ]
            if not events or events[0].get("event") != "create":
                continue
            self._replay(session_id, events)

    def _replay(self, session_id: str, events: list[dict]) -> None:
        create = events[0]
        session = self.create_session(
            create["images"], create["support_ids"],
            gt_masks=create.get("gt_masks") or None,
            session_id=session_id, journal=False,
        )
        snapshot = None
        snap_path = self._snapshot_path(session_id)
        if snap_path.exists():
            snapshot = np.load(snap_path)
        snap_rev = int(snapshot["revision"]) if snapshot is not None else -1
        if snap_rev > len(events) - 1:
            snapshot, snap_rev = None, -1  # stale snapshot; replay everything
        for event in events[1:]:
            replay_forward = session.revision >= snap_rev
            if event["event"] == "click":
                role, entry = session.find(event["image_id"])
                entry.clicks.append(ck.Click(
                    row=event["row"], col=event["col"],
                    polarity=event["polarity"], order=len(entry.clicks),
                ))
                if replay_forward:
                    self._run_forward(session)
                session.revision += 1
            elif event["event"] == "promote":
                role, entry = session.find(event["image_id"])
                session.queries.remove(entry)
                entry.clicks = []
                session.supports.append(entry)
                session.revision += 1
            if not replay_forward and session.revision == snap_rev:
                for e in session.supports + session.queries:
                    key = f"mask_{e.image_id}"
                    if key in snapshot:
                        e.mask = snapshot[key]


def create_app(store: SessionStore):
    """Build the FastAPI application around a session store."""
    from fastapi import FastAPI, Response
    from fastapi.responses import JSONResponse
    from pydantic import BaseModel

    app = FastAPI(title="ifseg annotation service")

    class ImageSpec(BaseModel):
        id: str
        png_b64: str | None = None

    class CreateSessionBody(BaseModel):
        images: list[ImageSpec]
        support_ids: list[str]
        gt_masks: dict[str, str] | None = None

    class ClickBody(BaseModel):
        image_id: str
        row: int
        col: int
        polarity: str
        expected_revision: int | None = None

    class PromoteBody(BaseModel):
        image_id: str
        expected_revision: int | None = None

    @app.exception_handler(SessionError)
    async def _session_error(request, exc: SessionError):
        return JSONResponse(status_code=exc.status, content={"detail": exc.detail})

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        session = store.create_session(
            [spec.model_dump() for spec in body.images],
            body.support_ids,
            gt_masks=body.gt_masks,
        )
        return session.to_json()

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return store.get_session(session_id).to_json()

    @app.post("/sessions/{session_id}/clicks")
    def add_click(session_id: str, body: ClickBody):
        session = store.add_click(
            session_id, body.image_id, body.row, body.col, body.polarity,
            expected_revision=body.expected_revision,
        )
        return session.to_json()

    @app.post("/sessions/{session_id}/promotions")
    def promote(session_id: str, body: PromoteBody):
        session = store.promote_query(
            session_id, body.image_id, expected_revision=body.expected_revision
        )
        return session.to_json()

    @app.get("/sessions/{session_id}/masks/{image_id}")
    def get_mask(session_id: str, image_id: str):
        session = store.get_session(session_id)
        _, entry = session.find(image_id)
        if entry.mask is None:
            raise SessionError(404, f"no mask computed yet for {image_id!r}")
        return Response(content=encode_mask_png(entry.mask), media_type="image/png")

    @app.get("/sessions/{session_id}/images/{image_id}")
    def get_image(session_id: str, image_id: str):
        session = store.get_session(session_id)
        _, entry = session.find(image_id)
        buf = io.BytesIO()
        Image.fromarray(entry.image).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    return app
