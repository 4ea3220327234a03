"""HTTP service for projection, editing, budgeted rendering and benchmarking.

The service holds an immutable model snapshot (generator, encoder,
directions, budget ladder); hot-swap replaces the snapshot reference
atomically while in-flight requests finish on the old one. Sessions are
JSON documents under the data directory; per-session locks serialize
concurrent edits; projection requests run through a bounded gate that
answers 429 when saturated.

Images travel as base64 PNG (lossless, 8-bit) or as base64 raw tensor
records for bit-exact tests.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from elastigen import persistence
from elastigen.generator import (
    ArchDescriptor, ConfigError, GeneratorWeights, SubnetConfig, WPlus,
    count_macs, full_config, make_config, synthesize,
)
from elastigen.perceptual import consistency_metric
from elastigen.projection import (
    EditDirection, EncoderWeights, ProjectionConfig, edit, project,
)
from elastigen.tensor import Tensor, no_grad


@dataclass
class ServiceConfig:
    checkpoint_path: str
    data_dir: str
    host: str = "127.0.0.1"
    port: int = 8321
    workers: int = 2
    queue_depth: int = 4
    projection_iterations: int = 40
    default_seed: int = 0

    @staticmethod
    def from_file(path: str) -> "ServiceConfig":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        return ServiceConfig(**raw)

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.__dict__, f, indent=1, sort_keys=True)
            f.write("\n")


@dataclass(frozen=True)
class BudgetEntry:
    budget_id: str
    config: SubnetConfig
    macs: int
    latency_ms: float | None = None


class ModelSnapshot:
    """Immutable bundle of everything a request needs."""

    def __init__(self, bundle: persistence.CheckpointBundle):
        meta = bundle.metadata
        self.descriptor = ArchDescriptor.from_metadata(meta["descriptor"])
        self.gweights = GeneratorWeights.from_state(self.descriptor, bundle.tensors,
                                                    prefix="G.")
        self.gweights.freeze()  # immutable snapshot: per-config render plans cached
        if not any(n.startswith("E.") for n in bundle.tensors):
            raise ConfigError("checkpoint has no encoder weights; "
                              "run the encoder training stage first")
        self.encoder = EncoderWeights.from_state(self.descriptor, bundle.tensors,
                                                 prefix="E.")
        self.encoder.set_requires_grad(False)
        self.directions: dict[str, EditDirection] = {}
        for name, entry in meta.get("directions", {}).items():
            self.directions[name] = EditDirection(
                name, np.asarray(entry["vector"], dtype=np.float32),
                tuple(entry.get("magnitude_range", (-3.0, 3.0))))
        self.ladder: list[BudgetEntry] = []
        for entry in meta.get("budget_ladder", []):
            cfg = make_config(entry["res_block"], entry["ratios"], self.descriptor)
            self.ladder.append(BudgetEntry(entry["id"], cfg,
                                           count_macs(self.descriptor, cfg),
                                           entry.get("latency_ms")))
        if not any(e.budget_id == "full" for e in self.ladder):
            cfg = full_config(self.descriptor)
            self.ladder.append(BudgetEntry("full", cfg,
                                           count_macs(self.descriptor, cfg)))
        self.ladder.sort(key=lambda e: e.macs)
        macs = [e.macs for e in self.ladder]
        if any(a >= b for a, b in zip(macs, macs[1:])):
            raise ConfigError("budget ladder MACs must be strictly increasing")
        self.metadata = meta

    def budget(self, budget_id: str) -> BudgetEntry:
        for e in self.ladder:
            if e.budget_id == budget_id:
                return e
        raise KeyError(budget_id)

    @property
    def default_preview_id(self) -> str:
        return self.ladder[0].budget_id  # smallest MACs


def default_ladder(desc: ArchDescriptor) -> list[dict]:
    """Uniform-ratio fallback ladder when no search results are available."""
    entries = []
    k = desc.num_blocks
    for name, ratio, block in (("0.25x-lowres", 0.25, min(desc.supported_blocks)),
                               ("0.25x", 0.25, k), ("0.5x", 0.5, k),
                               ("0.75x", 0.75, k)):
        cfg = make_config(block, (ratio,) * desc.num_mod_layers, desc)
        entries.append({"id": name, "res_block": cfg.res_block,
                        "ratios": list(cfg.ratios), "latency_ms": None})
    return entries


# ---------------------------------------------------------------------------
# image wire formats

def encode_image(arr: np.ndarray, fmt: str = "png") -> str:
    arr = np.asarray(arr)
    if arr.ndim == 4:
        arr = arr[0]
    if fmt == "raw":
        meta = np.asarray(arr, dtype=np.float32)
        buf = io.BytesIO()
        header = json.dumps({"shape": list(meta.shape)}).encode()
        buf.write(len(header).to_bytes(4, "little"))
        buf.write(header)
        buf.write(meta.tobytes())
        return base64.b64encode(buf.getvalue()).decode()
    if fmt != "png":
        raise ValueError(f"unknown image format {fmt!r}")
    from PIL import Image
    u8 = np.clip((arr.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def decode_image(payload: str, fmt: str = "png") -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except Exception as e:
        raise ValueError(f"invalid base64 payload: {e}") from e
    if fmt == "raw":
        if len(raw) < 4:
            raise ValueError("raw tensor payload truncated")
        hlen = int.from_bytes(raw[:4], "little")
        if hlen > len(raw) - 4:
            raise ValueError("raw tensor header truncated")
        header = json.loads(raw[4:4 + hlen].decode())
        shape = tuple(header["shape"])
        data = np.frombuffer(raw[4 + hlen:], dtype=np.float32)
        if data.size != int(np.prod(shape)):
            raise ValueError("raw tensor payload length mismatch")
        return data.reshape(shape).copy()
    if fmt != "png":
        raise ValueError(f"unknown image format {fmt!r}")
    from PIL import Image
    img = Image.open(io.BytesIO(raw)).convert("RGB")
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
    return arr / 127.5 - 1.0


# ---------------------------------------------------------------------------
# sessions

@dataclass
class EditSession:
    session_id: str
    wplus: WPlus
    source_digest: str
    seed: int
    edits: list[tuple[str, float]] = field(default_factory=list)
    preview_budget: str = "full"
    created_at: float = 0.0
    updated_at: float = 0.0

    def current_latent(self, directions: dict[str, EditDirection]) -> WPlus:
        """Replay the edit list with per-direction coalescing, so that an
        edit followed by its inverse restores the code bit-exactly."""
        sums: dict[str, float] = {}
        for name, mag in self.edits:
            sums[name] = sums.get(name, 0.0) + mag
        code = self.wplus
        for name in sorted(sums):
            if sums[name] != 0.0:
                code = edit(code, directions[name], sums[name])
        return code

    def to_document(self) -> dict:
        return {
            "session_id": self.session_id,
            "wplus": [[float(v) for v in row] for row in self.wplus.rows],
            "source_digest": self.source_digest,
            "seed": self.seed,
            "edits": [[n, m] for n, m in self.edits],
            "preview_budget": self.preview_budget,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @staticmethod
    def from_document(doc: dict) -> "EditSession":
        return EditSession(
            session_id=doc["session_id"],
            wplus=WPlus(np.asarray(doc["wplus"], dtype=np.float32)),
            source_digest=doc["source_digest"],
            seed=doc["seed"],
            edits=[(n, float(m)) for n, m in doc["edits"]],
            preview_budget=doc["preview_budget"],
            created_at=doc["created_at"],
            updated_at=doc["updated_at"],
        )


class SessionStore:
    def __init__(self, data_dir: str):
        self.dir = os.path.join(data_dir, "sessions")
        os.makedirs(self.dir, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def lock(self, session_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def save(self, session: EditSession) -> None:
        path = os.path.join(self.dir, f"{session.session_id}.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(session.to_document(), f)
        os.replace(tmp, path)

    def load(self, session_id: str) -> EditSession | None:
        path = os.path.join(self.dir, f"{session_id}.json")
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as f:
            return EditSession.from_document(json.load(f))


class ProjectionGate:
    """Bounded worker gate: at most `workers` running and `queue_depth`
    waiting; beyond that the caller gets a saturation signal."""

    def __init__(self, workers: int, queue_depth: int):
        self.sem = threading.Semaphore(workers)
        self.limit = workers + queue_depth
        self.count = 0
        self.guard = threading.Lock()

    def try_enter(self) -> bool:
        with self.guard:
            if self.count >= self.limit:
                return False
            self.count += 1
        self.sem.acquire()
        return True

    def leave(self) -> None:
        self.sem.release()
        with self.guard:
            self.count -= 1


# ---------------------------------------------------------------------------
# rendering and benchmarking helpers

def render_with_budget(snapshot: ModelSnapshot, code: WPlus, budget: BudgetEntry,
                       noise_seed: int) -> tuple[np.ndarray, float]:
    t0 = time.perf_counter()
    img, _ = synthesize(code, budget.config, snapshot.gweights,
                        noise_seed=noise_seed, intermediates=False)
    return img, (time.perf_counter() - t0) * 1000.0


def bench(snapshot: ModelSnapshot, repetitions: int = 20, warmup: int = 3,
          seed: int = 0) -> list[dict]:
    """Median and p95 wall-clock per ladder budget, descending MACs order."""
    from elastigen.generator import mapping
    rng = np.random.default_rng(seed)
    code = mapping(rng.standard_normal(snapshot.descriptor.z_dim), 0.5,
                   snapshot.gweights)
    rows = []
    for entry in sorted(snapshot.ladder, key=lambda e: -e.macs):
        for _ in range(warmup):
            render_with_budget(snapshot, code, entry, seed)
        times = []
        for _ in range(repetitions):
            _, ms = render_with_budget(snapshot, code, entry, seed)
            times.append(ms)
        rows.append({
            "budget_id": entry.budget_id,
            "macs": entry.macs,
            "median_ms": float(np.median(times)),
            "p95_ms": float(np.percentile(times, 95)),
        })
    return rows


def bench_report_text(rows: list[dict]) -> str:
    lines = ["budget_id macs median_ms p95_ms"]
    for r in rows:
        lines.append(f"{r['budget_id']} {r['macs']} {r['median_ms']:.3f} {r['p95_ms']:.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# FastAPI application

def create_app(config: ServiceConfig):
    from fastapi import FastAPI, Header, HTTPException, Request
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse

    app = FastAPI(title="elastigen")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    ui_dist = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(
        os.path.dirname(os.path.abspath(__file__))))), "frontend")
    if os.path.isdir(os.path.join(ui_dist, "dist")):
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=ui_dist, html=True), name="ui")
    state = {"snapshot": None}
    store = SessionStore(config.data_dir)
    gate = ProjectionGate(config.workers, config.queue_depth)

    def load_snapshot(path: str) -> None:
        bundle = persistence.load(path)
        # build fully, then swap the reference atomically
        state["snapshot"] = ModelSnapshot(bundle)

    app.state.load_snapshot = load_snapshot
    app.state.config = config
    if config.checkpoint_path and os.path.exists(config.checkpoint_path):
        load_snapshot(config.checkpoint_path)

    def need_snapshot() -> ModelSnapshot:
        snap = state["snapshot"]
        if snap is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return snap

    @app.get("/health")
    def health():
        return {"loaded": state["snapshot"] is not None}

    @app.get("/budgets")
    def budgets():
        snap = need_snapshot()
        return {"budgets": [
            {"id": e.budget_id, "macs": e.macs, "res_block": e.config.res_block,
             "ratios": list(e.config.ratios), "latency_ms": e.latency_ms}
            for e in snap.ladder]}

    @app.get("/directions")
    def directions():
        snap = need_snapshot()
        out = []
        for name, d in sorted(snap.directions.items()):
            vec = d.vector / np.linalg.norm(d.vector)  # recomputed server-side
            out.append({"name": name, "vector": [float(v) for v in vec],
                        "magnitude_range": list(d.magnitude_range)})
        return {"directions": out}

    @app.post("/sessions")
    def create_session(body: dict, x_noise_seed: int | None = Header(default=None)):
        snap = need_snapshot()
        fmt = body.get("format", "png")
        try:
            image = decode_image(body["image"], fmt)
        except (KeyError, ValueError) as e:
            raise HTTPException(status_code=400, detail=f"bad image payload: {e}")
        res = snap.descriptor.max_resolution
        if image.shape != (3, res, res):
            raise HTTPException(status_code=400,
                                detail=f"image must be [3,{res},{res}], got {list(image.shape)}")
        if not gate.try_enter():
            raise HTTPException(status_code=429, detail="projection workers saturated")
        try:
            seed = x_noise_seed if x_noise_seed is not None else config.default_seed
            pcfg = ProjectionConfig(alpha=1.0, iterations=config.projection_iterations,
                                    seed=seed, noise_seed=seed)
            result = project(image, snap.encoder, snap.gweights, pcfg)
            session = EditSession(
                session_id=uuid.uuid4().hex,
                wplus=result.wplus,
                source_digest=hashlib.sha256(image.astype(np.float32).tobytes()).hexdigest()[:16],
                seed=seed,
                preview_budget=snap.default_preview_id,
                created_at=time.time(), updated_at=time.time())
            store.save(session)
            preview_entry = snap.budget(session.preview_budget)
            with no_grad():
                full_img, _ = render_with_budget(snap, result.wplus,
                                                 snap.budget("full"), seed)
                prev_img, _ = render_with_budget(snap, result.wplus, preview_entry, seed)
                recon_full = float(consistency_metric(
                    Tensor(full_img), Tensor(image[None])).numpy())
                recon_prev = float(consistency_metric(
                    Tensor(prev_img), Tensor(image[None])).numpy())
            return {"session_id": session.session_id,
                    "wplus_digest": result.wplus.digest(),
                    "recon_loss_full": recon_full,
                    "recon_loss_preview": recon_prev}
        finally:
            gate.leave()

    def _load_session(session_id: str) -> EditSession:
        session = store.load(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    @app.post("/sessions/{session_id}/edit")
    def edit_session(session_id: str, body: dict,
                     x_noise_seed: int | None = Header(default=None)):
        snap = need_snapshot()
        with store.lock(session_id):
            session = _load_session(session_id)
            name = body.get("direction")
            if name not in snap.directions:
                raise HTTPException(status_code=404, detail=f"unknown direction {name!r}")
            direction = snap.directions[name]
            try:
                magnitude = float(body.get("magnitude", 0.0))
            except (TypeError, ValueError):
                raise HTTPException(status_code=422, detail="magnitude must be a number")
            lo, hi = direction.magnitude_range
            span = hi - lo
            if not (lo - span <= magnitude <= hi + span):
                raise HTTPException(status_code=422,
                                    detail=f"magnitude {magnitude} outside calibrated "
                                           f"range [{lo}, {hi}]")
            budget_id = body.get("budget_id", session.preview_budget)
            try:
                entry = snap.budget(budget_id)
            except KeyError:
                raise HTTPException(status_code=404, detail=f"unknown budget {budget_id!r}")
            session.edits.append((name, magnitude))
            session.preview_budget = budget_id
            session.updated_at = time.time()
            code = session.current_latent(snap.directions)
            seed = x_noise_seed if x_noise_seed is not None else session.seed
            img, ms = render_with_budget(snap, code, entry, seed)
            store.save(session)
        fmt = body.get("format", "png")
        return {"image": encode_image(img, fmt), "format": fmt,
                "latency_ms": ms, "budget_id": budget_id,
                "latent_digest": code.digest()}

    @app.post("/sessions/{session_id}/render")
    def render_session(session_id: str, body: dict | None = None,
                       x_noise_seed: int | None = Header(default=None)):
        snap = need_snapshot()
        body = body or {}
        with store.lock(session_id):
            session = _load_session(session_id)
            budget_id = body.get("budget_id", "full")
            try:
                entry = snap.budget(budget_id)
            except KeyError:
                raise HTTPException(status_code=404, detail=f"unknown budget {budget_id!r}")
            code = session.current_latent(snap.directions)
            seed = x_noise_seed if x_noise_seed is not None else session.seed
            img, ms = render_with_budget(snap, code, entry, seed)
            preview_entry = snap.budget(session.preview_budget)
            with no_grad():
                prev_img, _ = render_with_budget(snap, code, preview_entry, seed)
                consistency = float(consistency_metric(
                    Tensor(prev_img), Tensor(img)).numpy()) if entry.macs >= preview_entry.macs \
                    else float(consistency_metric(Tensor(img), Tensor(prev_img)).numpy())
        fmt = body.get("format", "png")
        return {"image": encode_image(img, fmt), "format": fmt,
                "latency_ms": ms, "budget_id": budget_id,
                "consistency_vs_preview": consistency,
                "latent_digest": code.digest()}

    @app.get("/bench")
    def bench_endpoint(repetitions: int = 20):
        snap = need_snapshot()
        return {"rows": bench(snap, repetitions=repetitions)}

    @app.exception_handler(Exception)
    async def on_error(request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    return app


def run_server(config: ServiceConfig) -> None:
    import uvicorn
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
