"""Tiny decoder-only transformer with a frozen grid encoder and a trainable connector.

The same weights serve autoregressive, full-diffusion and block-diffusion use;
only the attention mask and the position vector passed to :func:`forward`
change. Positions are learned absolute embeddings so that the noisy copy of an
answer token can share the position index of its clean twin.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import EOS_ID, MASK_ID, BOS_ID, COLOR_NAMES, GridImage
from .tensor import Tensor

VISION_PREFIX = "vision."
CONNECTOR_PREFIX = "connector."


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_positions: int = 512
    block_size: int = 8
    d_vis: int = 32
    n_colors: int = len(COLOR_NAMES)
    mlp_ratio: int = 4
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID
    mask_id: int = MASK_ID

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        specials = {self.bos_id, self.eos_id, self.mask_id}
        if len(specials) != 3 or max(specials) >= self.vocab_size or min(specials) < 0:
            raise ValueError("BOS/EOS/MASK ids must be distinct and inside the vocabulary")
        if self.n_layers < 1 or self.max_positions < 1:
            raise ValueError("n_layers and max_positions must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class Parameters:
    config: ModelConfig
    tensors: dict[str, Tensor]
    frozen: frozenset = field(default_factory=frozenset)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def trainable(self, subset: str = "all") -> list[str]:
        names = [n for n in self.tensors if n not in self.frozen]
        if subset == "connector":
            names = [n for n in names if n.startswith(CONNECTOR_PREFIX)]
        elif subset != "all":
            raise ValueError(f"unknown trainable subset {subset!r}")
        return names

    def with_grad(self, names) -> "Parameters":
        """Copy whose tensors in ``names`` are tracked; all others are constants."""
        names = set(names)
        tensors = {n: Tensor(t.data, requires_grad=n in names, name=n) for n, t in self.tensors.items()}
        return Parameters(self.config, tensors, self.frozen)

    def replace(self, arrays: dict) -> "Parameters":
        tensors = dict(self.tensors)
        for n, a in arrays.items():
            tensors[n] = Tensor(a, name=n)
        return Parameters(self.config, tensors, self.frozen)

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config, {n: Tensor(t.data.astype(dtype), name=n) for n, t in self.tensors.items()},
                          self.frozen)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}


def init_params(config: ModelConfig, seed: int = 0) -> Parameters:
    """Deterministic initialization; linear weights drawn N(0, 1/fan_in)."""
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    d, V, F = config.d_model, config.vocab_size, config.mlp_ratio * config.d_model

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)

    arrays = {
        "tok_emb": normal((V, d), d),
        "pos_emb": normal((config.max_positions, d), d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        arrays[p + "ln1"] = np.ones(d, np.float32)
        for w in ("wq", "wk", "wv", "wo"):
            arrays[p + w] = normal((d, d), d)
        arrays[p + "ln2"] = np.ones(d, np.float32)
        arrays[p + "w1"] = normal((d, F), d)
        arrays[p + "b1"] = np.zeros(F, np.float32)
        arrays[p + "w2"] = normal((F, d), F)
        arrays[p + "b2"] = np.zeros(d, np.float32)
    arrays["ln_f"] = np.ones(d, np.float32)
    arrays["head"] = normal((d, V), d)
    arrays[VISION_PREFIX + "enc"] = normal((config.n_colors, config.d_vis), 1)
    arrays[CONNECTOR_PREFIX + "w1"] = normal((config.d_vis, d), config.d_vis)
    arrays[CONNECTOR_PREFIX + "b1"] = np.zeros(d, np.float32)
    arrays[CONNECTOR_PREFIX + "w2"] = normal((d, d), d)
    arrays[CONNECTOR_PREFIX + "b2"] = np.zeros(d, np.float32)
    tensors = {n: Tensor(a, name=n) for n, a in arrays.items()}
    return Parameters(config, tensors, frozenset({VISION_PREFIX + "enc"}))


# ---------------------------------------------------------------- vision path


def encode_image(params: Parameters, grid) -> Tensor:
    """Frozen per-cell linear map of color one-hots: (..., G*G) cells -> (..., G*G, d_vis)."""
    cells = grid.as_array() if isinstance(grid, GridImage) else np.asarray(grid, dtype=np.int64)
    if cells.shape[-1] > params.config.max_positions:
        raise ValueError("grid has more cells than the position budget")
    if cells.size and (cells.min() < 0 or cells.max() >= params.config.n_colors):
        raise ValueError("cell color index outside the encoder palette")
    enc = params[VISION_PREFIX + "enc"]
    # one_hot @ W is a row lookup; the encoder never receives gradients
    return Tensor(enc.data[cells])


def connect(params: Parameters, vision_embeds: Tensor) -> Tensor:
    """Two affine layers with GELU between: d_vis -> d_model."""
    if vision_embeds.shape[-1] != params.config.d_vis:
        raise ValueError(f"connector expects last dim {params.config.d_vis}, got {vision_embeds.shape[-1]}")
    h = T.gelu(vision_embeds @ params[CONNECTOR_PREFIX + "w1"] + params[CONNECTOR_PREFIX + "b1"])
    return h @ params[CONNECTOR_PREFIX + "w2"] + params[CONNECTOR_PREFIX + "b2"]


def embed_tokens(params: Parameters, ids) -> Tensor:
    return T.embedding(params["tok_emb"], np.asarray(ids, dtype=np.int64))


def embed_prompt(params: Parameters, images, prompt_ids) -> Tensor:
    """``[connector(encoder(image)) ; token embeddings]`` along the sequence axis.

    ``images`` is None (text-only), a GridImage, or an int array (B, G*G);
    ``prompt_ids`` is (L,) or (B, L).
    """
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    text = embed_tokens(params, prompt_ids)
    if images is None:
        return text
    vis = connect(params, encode_image(params, images))
    return T.concat([vis, text], axis=-2)


# ---------------------------------------------------------------- KV cache


@dataclass
class KVCache:
    """Committed keys/values, one (H, M, head_dim) pair per layer."""

    keys: list
    values: list
    length: int = 0

    @classmethod
    def empty(cls, config: ModelConfig, dtype=np.float32) -> "KVCache":
        z = np.zeros((config.n_heads, 0, config.head_dim), dtype=dtype)
        return cls([z] * config.n_layers, [z] * config.n_layers, 0)

    def append(self, fresh) -> "KVCache":
        """New cache with ``fresh`` (list of per-layer (k, v)) appended."""
        lengths = {k.shape[-2] for k, _ in fresh}
        if len(lengths) != 1:
            raise ValueError("all layers must append the same number of positions")
        n = lengths.pop()
        keys = [np.concatenate([ck, k.reshape(ck.shape[0], n, -1)], axis=-2) for ck, (k, _) in zip(self.keys, fresh)]
        values = [np.concatenate([cv, v.reshape(cv.shape[0], n, -1)], axis=-2) for cv, (_, v) in zip(self.values, fresh)]
        return KVCache(keys, values, self.length + n)


@dataclass
class ForwardOutput:
    logits: Tensor
    kv: list


# ---------------------------------------------------------------- forward


def forward(params: Parameters, inputs, positions, attn_mask, cache: KVCache | None = None) -> ForwardOutput:
    """Run the transformer over a query span.

    ``inputs`` is either token ids ``(L,)``/``(B, L)`` or an embedding Tensor
    ``(L, d)``/``(B, L, d)``. ``positions`` gives the absolute position index
    of every query. ``attn_mask`` is a boolean ``(L, cache_len + L)`` matrix
    (or batched ``(B, L, K)``). The cache is read, never modified; fresh K/V
    of the query span are returned so the caller can commit them.
    """
    cfg = params.config
    if isinstance(inputs, Tensor):
        x = inputs
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
    else:
        ids = np.asarray(inputs, dtype=np.int64)
        squeeze = ids.ndim == 1
        x = embed_tokens(params, ids.reshape(1, -1) if squeeze else ids)
    B, L, d = x.shape
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape[-1] != L:
        raise ValueError("one position index per query is required")
    if positions.size and (positions.max() >= cfg.max_positions or positions.min() < 0):
        raise IndexError(f"position index outside [0, {cfg.max_positions})")
    cache_len = cache.length if cache is not None else 0
    if cache is not None and B != 1:
        raise ValueError("cached forward supports a single stream")
    allow = np.asarray(attn_mask, dtype=bool)
    if allow.shape[-2:] != (L, cache_len + L):
        raise ValueError(f"mask shape {allow.shape} does not cover {L} queries x {cache_len + L} keys")
    allow = allow[None, None] if allow.ndim == 2 else allow[:, None]

    x = x + T.embedding(params["pos_emb"], positions)
    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    fresh = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = T.rms_norm(x, params[p + "ln1"])

        def heads(t):
            return t.reshape(B, L, H, hd).transpose(0, 2, 1, 3)

        q = heads(h @ params[p + "wq"])
        k = heads(h @ params[p + "wk"])
        v = heads(h @ params[p + "wv"])
        fresh.append((k.data[0] if B == 1 else k.data, v.data[0] if B == 1 else v.data))
        if cache_len:
            k = T.concat([Tensor(cache.keys[i][None]), k], axis=2)
            v = T.concat([Tensor(cache.values[i][None]), v], axis=2)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = T.masked_softmax(scores, allow) @ v
        attn = attn.transpose(0, 2, 1, 3).reshape(B, L, d)
        x = x + attn @ params[p + "wo"]
        h = T.rms_norm(x, params[p + "ln2"])
        x = x + T.gelu(h @ params[p + "w1"] + params[p + "b1"]) @ params[p + "w2"] + params[p + "b2"]
    x = T.rms_norm(x, params["ln_f"])
    logits = x @ params["head"]
    if squeeze:
        logits = logits.reshape(L, cfg.vocab_size)
    return ForwardOutput(logits, fresh)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: Parameters, path, extra: dict | None = None) -> None:
    """Write ``manifest.json`` and ``params.bin`` (little-endian f32) into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset, blobs = [], 0, []
    for name, t in params.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": "blockvlm-checkpoint/1",
        "config": asdict(params.config),
        "frozen": sorted(params.frozen),
        "tensors": entries,
        "extra": extra or {},
    }
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_checkpoint(path) -> Parameters:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != "blockvlm-checkpoint/1":
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = (path / "params.bin").read_bytes()
    config = ModelConfig(**manifest["config"])
    expected = {n: t.shape for n, t in init_params(config, 0).tensors.items()}
    found = {e["name"]: tuple(e["shape"]) for e in manifest["tensors"]}
    if found != expected:
        bad = sorted(set(found.items()) ^ set(expected.items()))
        raise ValueError(f"checkpoint tensors do not match its config: {bad[:4]}")
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = Tensor(arr.astype(np.float32), name=e["name"])
    return Parameters(config, tensors, frozenset(manifest.get("frozen", ())))


def checkpoint_extra(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8")).get("extra", {})
