"""Toy convolutional backbone with a GAP + embedding main branch and the
high-order-moment branch (sketch -> spatial mean -> embedding per order),
plus checkpoint persistence (``model.json`` manifest + ``model.bin`` blob).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import sketch as S
from .numkernel import Graph, Node

STACK_MODES = ("frozen", "trainable-uncascaded", "trainable-cascaded")
CHECKPOINT_FORMAT = "horde-checkpoint/1"


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class BackboneConfig:
    filters: list[int] = field(default_factory=lambda: [16, 32, 64])
    strides: list[int] = field(default_factory=lambda: [2, 2, 1])
    kernel: int = 3
    input_shape: list[int] = field(default_factory=lambda: [28, 28])

    def __post_init__(self):
        if len(self.filters) != len(self.strides) or not self.filters:
            raise ValueError("filters and strides must be non-empty and of equal length")
        h, w = self.output_hw
        if h < 2 or w < 2 or h * w < 6:
            raise ValueError(f"backbone output {h}x{w} too small for spatial subsampling")

    @property
    def pad(self) -> int:
        return self.kernel // 2

    @property
    def output_hw(self) -> tuple[int, int]:
        h, w = self.input_shape
        for s in self.strides:
            h = (h + 2 * self.pad - self.kernel) // s + 1
            w = (w + 2 * self.pad - self.kernel) // s + 1
        return h, w

    @property
    def channels(self) -> int:
        return self.filters[-1]


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    embedding_dim: int = 32
    horde: bool = True
    K: int = 4
    d: int = 256
    order_embedding_dim: int = 32
    stack_mode: str = "trainable-cascaded"
    normalize: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.stack_mode not in STACK_MODES:
            raise ValueError(f"stack_mode must be one of {STACK_MODES}")
        if self.horde and self.K < 2:
            raise ValueError("K must be >= 2 when the HORDE branch is enabled")
        if self.embedding_dim < 2 or self.order_embedding_dim < 2:
            raise ValueError("embedding dims must be >= 2")

    @property
    def orders(self) -> list[int]:
        return list(range(2, self.K + 1)) if self.horde else []

    def to_dict(self) -> dict:
        return asdict(self)


def _he(rng, shape, fan_in):
    return rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape)


class HordeModel:
    """Parameters plus graph builders for training and inference."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, _empty: bool = False):
        self.cfg = cfg
        self.seed = int(seed)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        if not _empty:
            self._init(np.random.SeedSequence(self.seed))

    def _init(self, ss):
        cfg = self.cfg
        bb_seed, head_seed, sketch_seed = ss.spawn(3)
        rng = np.random.default_rng(bb_seed)
        cin = 1
        for i, f in enumerate(cfg.backbone.filters):
            k = cfg.backbone.kernel
            self.params[f"conv{i}.w"] = _he(rng, (k, k, cin, f), k * k * cin)
            self.params[f"conv{i}.b"] = np.zeros(f)
            cin = f
        c = cfg.backbone.channels
        rng = np.random.default_rng(head_seed)
        self.params["embed.w"] = rng.normal(scale=1 / math.sqrt(c), size=(c, cfg.embedding_dim))
        self.params["embed.b"] = np.zeros(cfg.embedding_dim)
        if not cfg.horde:
            return
        # order heads draw from their own stream so enabling HORDE never perturbs the main branch
        head_rng = np.random.default_rng(sketch_seed.spawn(1)[0])
        for k in cfg.orders:
            self.params[f"head{k}.w"] = head_rng.normal(scale=1 / math.sqrt(cfg.d), size=(cfg.d, cfg.order_embedding_dim))
            self.params[f"head{k}.b"] = np.zeros(cfg.order_embedding_dim)
        stack_seed = int(sketch_seed.generate_state(1)[0])
        if cfg.stack_mode == "trainable-uncascaded":
            for k, st in S.sample_uncascaded(c, cfg.d, cfg.K, stack_seed).items():
                for j in range(k):
                    self.params[f"sketch.o{k}.W{j + 1}"] = st.matrices[j].copy()
        else:
            st = S.sample_rademacher(c, cfg.d, cfg.K, stack_seed)
            store = self.params if cfg.stack_mode == "trainable-cascaded" else self.buffers
            for k in range(cfg.K):
                store[f"sketch.W{k + 1}"] = st.matrices[k].copy()

    # -- introspection

    def sketch_parameter_count(self) -> int:
        return sum(v.size for n, v in self.params.items() if n.startswith("sketch."))

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def stack(self) -> S.ProjectorStack:
        """Cascaded / frozen projector stack as a :class:`ProjectorStack`."""
        src = self.tensors()
        mats = np.stack([src[f"sketch.W{k + 1}"] for k in range(self.cfg.K)])
        return S.ProjectorStack(mats, trainable=self.cfg.stack_mode == "trainable-cascaded")

    # -- graph construction

    def build_graph(self, include_horde: bool = True, loss_cfg: L.LossConfig | None = None,
                    outputs: tuple[str, ...] | None = None) -> tuple[Graph, dict[str, Node]]:
        """Build the network graph.

        Named nodes returned: ``features``, ``embedding`` and, with the HORDE
        branch, ``moment{k}`` / ``order{k}``; with ``loss_cfg`` also ``dml``,
        ``horde``, ``loss`` and ``loss{k}``. ``outputs`` selects which of them
        the graph reports (default: all).
        """
        cfg = self.cfg
        include_horde = include_horde and cfg.horde
        g = Graph()
        nodes: dict[str, Node] = {}
        h = g.input("images", differentiable=False)
        with g.scope("backbone"):
            for i, s in enumerate(cfg.backbone.strides):
                h = g.conv2d(h, g.parameter(f"conv{i}.w", self.params[f"conv{i}.w"]), stride=s, pad=cfg.backbone.pad)
                h = g.relu(g.add(h, g.parameter(f"conv{i}.b", self.params[f"conv{i}.b"])))
        nodes["features"] = h
        with g.scope("main"):
            gap = g.mean(h, axes=(1, 2))
            emb = g.add(g.matmul(gap, g.parameter("embed.w", self.params["embed.w"])),
                        g.parameter("embed.b", self.params["embed.b"]))
            if cfg.normalize:
                emb = g.l2_normalize(emb)
        nodes["embedding"] = emb
        order_embs = {}
        if include_horde:
            with g.scope("horde"):
                moments = self._sketch_branch(g, h)
                for k, m in moments.items():
                    nodes[f"moment{k}"] = m
                    e = g.add(g.matmul(m, g.parameter(f"head{k}.w", self.params[f"head{k}.w"])),
                              g.parameter(f"head{k}.b", self.params[f"head{k}.b"]))
                    if cfg.normalize:
                        e = g.l2_normalize(e)
                    nodes[f"order{k}"] = order_embs[k] = e
        if loss_cfg is not None:
            with g.scope("main"):
                nodes["dml"] = L.dml_graph(g, emb, loss_cfg)
            total = nodes["dml"]
            if order_embs:
                with g.scope("horde"):
                    nodes["horde"], per_order = L.horde_graph(g, order_embs, loss_cfg)
                for k, n in per_order.items():
                    nodes[f"loss{k}"] = n
                total = g.add(total, nodes["horde"])
            nodes["loss"] = total
        for name in (outputs if outputs is not None else nodes):
            g.output(name, nodes[name])
        return g, nodes

    def _sketch_branch(self, g: Graph, feats: Node) -> dict[int, Node]:
        cfg = self.cfg
        if cfg.stack_mode == "trainable-uncascaded":
            phis = {}
            for k in cfg.orders:
                mats = [g.parameter(f"sketch.o{k}.W{j + 1}", self.params[f"sketch.o{k}.W{j + 1}"]) for j in range(k)]
                phis[k] = S.direct_graph(g, feats, mats, cfg.d)
        elif cfg.stack_mode == "trainable-cascaded":
            mats = [g.parameter(f"sketch.W{k + 1}", self.params[f"sketch.W{k + 1}"]) for k in range(cfg.K)]
            phis = S.cascade_graph(g, feats, mats, cfg.K, cfg.d)
        else:
            mats = [g.constant(self.buffers[f"sketch.W{k + 1}"], name=f"sketch.W{k + 1}") for k in range(cfg.K)]
            phis = {k: S.direct_graph(g, feats, mats[:k], cfg.d) for k in cfg.orders}
        return {k: g.mean(phi, axes=(1, 2)) for k, phi in phis.items()}

    # -- inference helpers

    def run(self, images, names=("embedding",), include_horde: bool = False, batch_size: int = 250) -> dict:
        """Evaluate named nodes over ``images`` in chunks; returns stacked arrays."""
        g, _ = self.build_graph(include_horde=include_horde, outputs=tuple(names))
        chunks = {n: [] for n in names}
        for start in range(0, len(images), batch_size):
            out = g.forward({"images": images[start : start + batch_size]})
            for n in names:
                chunks[n].append(out[n])
        return {n: np.concatenate(v) for n, v in chunks.items()}

    def embed(self, images, batch_size: int = 250) -> np.ndarray:
        """Retrieval embeddings (order 1 only; the HORDE branch is never built)."""
        return self.run(images, ("embedding",), include_horde=False, batch_size=batch_size)["embedding"]

    def embed_features(self, pooled) -> np.ndarray:
        """Main-branch head applied to already pooled c-vectors (N, c)."""
        e = pooled @ self.params["embed.w"] + self.params["embed.b"]
        if self.cfg.normalize:
            e = e / np.maximum(np.linalg.norm(e, axis=-1, keepdims=True), 1e-12)
        return e


def first_order_representation(fmap) -> np.ndarray:
    """Spatial mean of an (h, w, c) or (B, h, w, c) feature map."""
    fmap = np.asarray(fmap, dtype=np.float64)
    return fmap.mean(axis=(-3, -2))


def horde_branch(fmap, stack: S.ProjectorStack, heads: dict[int, tuple[np.ndarray, np.ndarray]],
                 normalize: bool = True) -> dict[int, np.ndarray]:
    """Order-k embeddings of one (h, w, c) feature map, k = 2..K (numpy reference path)."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.shape[-1] != stack.c:
        raise ValueError(f"feature dim {fmap.shape[-1]} != stack c={stack.c}")
    K = max(heads)
    sk = S.cascade_sketches(fmap.reshape(-1, stack.c), stack, K)
    out = {}
    for k, (w, b) in sorted(heads.items()):
        e = sk.orders[k].mean(axis=0) @ w + b
        if normalize:
            e = e / max(np.linalg.norm(e), 1e-12)
        out[k] = e
    return out


# -- checkpoints


def save_checkpoint(model: HordeModel, path, step: int = 0, extra: dict | None = None) -> Path:
    """Write ``model.json`` + ``model.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    trainable = set(model.params)
    for name, arr in model.tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64", "offset": offset,
                        "nbytes": len(data), "trainable": name in trainable})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "byte_order": "little",
        "config": model.cfg.to_dict(),
        "seeds": {"model": model.seed},
        "step": int(step),
        "tensors": entries,
        "extra": extra or {},
    }
    tmp_bin, tmp_json = path / "model.bin.tmp", path / "model.json.tmp"
    tmp_bin.write_bytes(b"".join(blobs))
    tmp_json.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp_bin.replace(path / "model.bin")
    tmp_json.replace(path / "model.json")
    return path


def read_manifest(path) -> dict:
    try:
        manifest = json.loads((Path(path) / "model.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest in {path}: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[HordeModel, dict]:
    """Load a checkpoint directory; returns (model, manifest).

    With ``expected`` the stored config echo must match it exactly.
    """
    path = Path(path)
    manifest = read_manifest(path)
    try:
        cfg = ModelConfig(**manifest["config"])
        entries = manifest["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = {k: (v, expected.to_dict()[k]) for k, v in cfg.to_dict().items() if expected.to_dict()[k] != v}
        raise ConfigMismatchError(f"checkpoint config differs from expected (stored, expected): {diff}")
    blob = (path / "model.bin").read_bytes()
    reference = HordeModel(cfg, seed=manifest.get("seeds", {}).get("model", 0))
    want = reference.tensors()
    model = HordeModel(cfg, seed=reference.seed, _empty=True)
    offset = 0
    for e in entries:
        if e["offset"] != offset or e["dtype"] != "float64":
            raise CheckpointError(f"tensor {e['name']!r}: offsets do not partition the blob")
        nbytes = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["nbytes"] != nbytes:
            raise CheckpointError(f"tensor {e['name']!r}: size field inconsistent with shape")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"blob truncated: {e['name']!r} needs bytes up to {offset + nbytes}, "
                                  f"file has {len(blob)}")
        if e["name"] not in want or list(want[e["name"]].shape) != list(e["shape"]):
            raise ConfigMismatchError(f"tensor {e['name']!r} shape {e['shape']} does not fit the config")
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(e["shape"]).astype(np.float64)
        (model.params if e["trainable"] else model.buffers)[e["name"]] = arr
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"blob has {len(blob) - offset} trailing bytes")
    missing = set(want) - set(model.tensors())
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    return model, manifest
