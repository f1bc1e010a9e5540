"""Small L-layer causal MoE transformer: target model, derived draft model,
and forward passes under causal or tree (ancestor) attention masks.

The architecture is deliberately minimal: single-head attention, RMS-style
scale-only normalization, no positional encoding beyond the mask. Because
positions enter only through the attention mask, a tree-masked forward
restricted to any root-to-node path is arithmetically the causal forward of
that path, which is what makes tree verification exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .moe_core import Expert, MoELayerWeights, RouterWeights, moe_forward_full_batch
from .numerics import Rng, masked_softmax

__all__ = [
    "DraftSpec",
    "ForwardResult",
    "LayerTrace",
    "ModelConfig",
    "MoEModel",
    "PRESETS",
    "TreeDecoder",
    "build_target",
    "causal_mask",
    "derive_draft",
    "forward",
    "load_model",
    "preset_config",
    "random_tokens",
    "save_model",
]

RMS_EPS = 1e-8

# Expert-count presets mirroring common production shapes at toy width.
PRESETS: dict[str, dict] = {
    "olmoe-toy": {"n_experts": 64, "top_k": 8, "renormalize": True},
    "qwen3-toy": {"n_experts": 128, "top_k": 8, "renormalize": False},
    "mixtral-toy": {"n_experts": 8, "top_k": 2, "renormalize": True},
}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_ff: int = 64
    n_experts: int = 64
    top_k: int = 8
    n_layers: int = 4
    vocab_size: int = 256
    renormalize: bool = True
    skew: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.top_k > self.n_experts:
            raise ValueError("top_k must not exceed n_experts")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model < 1 or self.d_ff < 1:
            raise ValueError("d_model and d_ff must be >= 1")
        if self.skew < 0:
            raise ValueError("skew must be >= 0")


def preset_config(name: str, **overrides) -> ModelConfig:
    """ModelConfig for a named expert-shape preset."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(ModelConfig(), **{**PRESETS[name], **overrides})


@dataclass(frozen=True)
class DraftSpec:
    """How the draft model is derived from the target: relative Gaussian
    weight perturbation plus optional truncation to the first blocks."""

    noise_std: float = 0.05
    layers_kept: int | None = None  # None keeps all layers

    def validate(self, n_layers: int) -> None:
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        kept = self.layers_kept if self.layers_kept is not None else n_layers
        if not (1 <= kept <= n_layers):
            raise ValueError("layers_kept must be in 1..n_layers")


@dataclass
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class TransformerBlock:
    attention: AttentionWeights
    moe: MoELayerWeights


@dataclass
class MoEModel:
    config: ModelConfig
    embedding: np.ndarray  # (vocab_size, d_model)
    blocks: list[TransformerBlock]
    head: np.ndarray  # (vocab_size, d_model)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)


def rms_norm(x: np.ndarray) -> np.ndarray:
    """Scale-only normalization: x / sqrt(mean(x^2) + eps)."""
    return x / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + RMS_EPS)


def random_tokens(rng: Rng, length: int, vocab_size: int) -> np.ndarray:
    """Seeded uniform token sequence, the prompt/calibration generator."""
    return rng.integers(0, vocab_size, size=length)


def _gaussian(rng: Rng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(size=shape, scale=1.0 / np.sqrt(fan_in))


def _router_bias(rng: Rng, n_experts: int, skew: float) -> np.ndarray:
    """Additive logit bias b = skew * log(1/(rank+1)) under a seeded random
    expert permutation; skew=0 leaves experts exchangeable, larger skew
    concentrates routing mass on the low-rank experts."""
    perm = rng.permutation(n_experts)  # perm[r] = expert holding rank r
    rank = np.empty(n_experts, dtype=np.int64)
    rank[perm] = np.arange(n_experts)
    return -skew * np.log(rank + 1.0)


def build_target(config: ModelConfig) -> MoEModel:
    """Deterministically build the target model from its config.

    All weights are i.i.d. Gaussian scaled by 1/sqrt(fan_in), drawn from
    substreams keyed by component so the layout is stable under refactoring.
    """
    config.validate()
    root = Rng(config.seed)
    d, dff, n, v = config.d_model, config.d_ff, config.n_experts, config.vocab_size

    embedding = _gaussian(root.substream(0), (v, d), d)
    head = _gaussian(root.substream(1), (v, d), d)

    blocks = []
    for layer in range(config.n_layers):
        lr = root.substream(2, layer)
        attn = AttentionWeights(
            wq=_gaussian(lr.substream(0), (d, d), d),
            wk=_gaussian(lr.substream(1), (d, d), d),
            wv=_gaussian(lr.substream(2), (d, d), d),
            wo=_gaussian(lr.substream(3), (d, d), d),
        )
        router = RouterWeights(
            w=_gaussian(lr.substream(4), (n, d), d),
            bias=_router_bias(lr.substream(5), n, config.skew),
        )
        experts = [
            Expert(
                w_in=_gaussian(lr.substream(6, e), (dff, d), d),
                w_out=_gaussian(lr.substream(7, e), (d, dff), dff),
            )
            for e in range(n)
        ]
        blocks.append(
            TransformerBlock(
                attention=attn,
                moe=MoELayerWeights(
                    router=router,
                    experts=experts,
                    renormalize=config.renormalize,
                    k=config.top_k,
                ),
            )
        )
    return MoEModel(config=config, embedding=embedding, blocks=blocks, head=head)


def _perturb(w: np.ndarray, noise_std: float, rng: Rng) -> np.ndarray:
    scale = noise_std * float(np.std(w))
    return w + rng.normal(size=w.shape, scale=1.0) * scale


def derive_draft(target: MoEModel, spec: DraftSpec, rng: Rng) -> MoEModel:
    """Draft model: keep the first ``layers_kept`` blocks of the target and
    perturb each block weight matrix by Gaussian noise with std equal to
    ``noise_std`` times that matrix's own weight std.

    Embedding and output head are retained unperturbed so draft and target
    share the token interface. noise_std=0 with all layers kept reproduces
    the target exactly.
    """
    spec.validate(target.n_layers)
    kept = spec.layers_kept if spec.layers_kept is not None else target.n_layers

    blocks = []
    for layer in range(kept):
        src = target.blocks[layer]
        lr = rng.substream(layer)
        attn = AttentionWeights(
            wq=_perturb(src.attention.wq, spec.noise_std, lr.substream(0)),
            wk=_perturb(src.attention.wk, spec.noise_std, lr.substream(1)),
            wv=_perturb(src.attention.wv, spec.noise_std, lr.substream(2)),
            wo=_perturb(src.attention.wo, spec.noise_std, lr.substream(3)),
        )
        moe = MoELayerWeights(
            router=RouterWeights(
                w=_perturb(src.moe.router.w, spec.noise_std, lr.substream(4)),
                bias=src.moe.router.bias.copy(),
            ),
            experts=[
                Expert(
                    w_in=_perturb(e.w_in, spec.noise_std, lr.substream(5, i)),
                    w_out=_perturb(e.w_out, spec.noise_std, lr.substream(6, i)),
                )
                for i, e in enumerate(src.moe.experts)
            ],
            renormalize=src.moe.renormalize,
            k=src.moe.k,
        )
        blocks.append(TransformerBlock(attention=attn, moe=moe))

    config = replace(target.config, n_layers=kept)
    return MoEModel(
        config=config,
        embedding=target.embedding.copy(),
        blocks=blocks,
        head=target.head.copy(),
    )


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


@dataclass
class LayerTrace:
    """Per-layer capture from a forward pass: the normalized states the MoE
    sublayer consumed, and the natural routing they induced."""

    moe_input: np.ndarray  # (T, d_model)
    probs: np.ndarray  # (T, n_experts)
    selected: np.ndarray  # (T, k)


@dataclass
class ForwardResult:
    logits: np.ndarray  # (T, vocab_size)
    layers: list[LayerTrace]


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular attention mask: position i attends to 0..i."""
    return np.tril(np.ones((n, n), dtype=bool))


def _attend(attn: AttentionWeights, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    xn = rms_norm(x)
    q = xn @ attn.wq.T
    k = xn @ attn.wk.T
    v = xn @ attn.wv.T
    scores = (q @ k.T) / np.sqrt(x.shape[-1])
    return masked_softmax(scores, mask) @ v @ attn.wo.T


def forward(
    model: MoEModel,
    tokens,
    mask: np.ndarray | None = None,
    moe_fn=None,
) -> ForwardResult:
    """Run the model over ``tokens`` under an arbitrary ancestor mask.

    ``mask`` is a (T, T) boolean matrix where entry (i, j) allows position i
    to attend to position j; ``None`` means plain causal attention. Each
    block is pre-norm residual: x += attn(norm(x)); x += moe(norm(x)).

    ``moe_fn(layer_index, layer, states) -> (out, probs, selected)`` replaces
    the unbudgeted MoE sublayer when given; the default runs every layer at
    full capacity. Captured probs/selected always describe natural routing.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if np.any(tokens < 0) or np.any(tokens >= model.config.vocab_size):
        raise ValueError("token id out of vocabulary range")
    n = tokens.size
    if mask is None:
        mask = causal_mask(n)
    if mask.shape != (n, n):
        raise ValueError(f"mask must have shape ({n}, {n})")

    x = model.embedding[tokens]
    traces = []
    for li, block in enumerate(model.blocks):
        x = x + _attend(block.attention, x, mask)
        moe_in = rms_norm(x)
        if moe_fn is None:
            out, probs, selected = moe_forward_full_batch(block.moe, moe_in)
        else:
            out, probs, selected = moe_fn(li, block.moe, moe_in)
        traces.append(LayerTrace(moe_input=moe_in, probs=probs, selected=selected))
        x = x + out
    logits = rms_norm(x) @ model.head.T
    return ForwardResult(logits=logits, layers=traces)


class _RowCache:
    """Growable (rows, d) buffer with O(1) truncation."""

    def __init__(self, d: int, capacity: int = 256):
        self._buf = np.empty((capacity, d))
        self.length = 0

    def append(self, rows: np.ndarray) -> None:
        need = self.length + rows.shape[0]
        if need > self._buf.shape[0]:
            grown = np.empty((max(need, 2 * self._buf.shape[0]), self._buf.shape[1]))
            grown[: self.length] = self._buf[: self.length]
            self._buf = grown
        self._buf[self.length : need] = rows
        self.length = need

    def view(self) -> np.ndarray:
        return self._buf[: self.length]


class TreeDecoder:
    """Incremental forward over a causal prefix plus a growing token tree.

    Under ancestor masking, already-computed rows never change when new rows
    are appended, so each extension only computes the new rows against
    cached per-layer keys/values. Numerically this matches the one-shot
    masked forward to floating-point roundoff.

    The decoder also supports checkpoint/rollback of the tree rows and
    appending accepted tokens to the causal prefix, so one decoder can serve
    a whole generation loop: draft a tree, roll it back, append the accepted
    tokens, draft the next tree.
    """

    def __init__(self, model: MoEModel, context_tokens):
        self.model = model
        context_tokens = np.asarray(context_tokens, dtype=np.int64)
        if context_tokens.size == 0:
            raise ValueError("context must be non-empty")
        self.causal_len = int(context_tokens.size)
        self.n_rows = self.causal_len
        self._allowed: list[np.ndarray] = []  # per tree row: attended columns
        d = model.config.d_model
        self._k_cache = [_RowCache(d) for _ in model.blocks]
        self._v_cache = [_RowCache(d) for _ in model.blocks]

        # One causal pass over the context, seeding the per-layer caches.
        x = model.embedding[context_tokens]
        cmask = causal_mask(self.causal_len)
        scale = np.sqrt(d)
        for li, block in enumerate(model.blocks):
            xn = rms_norm(x)
            q = xn @ block.attention.wq.T
            k = xn @ block.attention.wk.T
            v = xn @ block.attention.wv.T
            self._k_cache[li].append(k)
            self._v_cache[li].append(v)
            att = masked_softmax((q @ k.T) / scale, cmask) @ v
            x = x + att @ block.attention.wo.T
            out, _, _ = moe_forward_full_batch(block.moe, rms_norm(x))
            x = x + out
        self.context_logits = rms_norm(x[-1]) @ model.head.T

    @property
    def n_context(self) -> int:
        return self.causal_len

    def run_rows(
        self,
        tokens: np.ndarray,
        allowed: np.ndarray,
        within: np.ndarray | None = None,
        moe_hook=None,
    ) -> np.ndarray:
        """Compute a batch of new rows against the caches; returns logits.

        ``allowed`` is (r, cached) over existing rows. ``within`` is the
        (r, r) attention mask among the new rows themselves; by default each
        row attends only to itself. ``moe_hook(layer_index, layer, states)
        -> (out, probs, selected)`` overrides the full-capacity MoE sublayer
        for the new rows (budgeted verification hooks in here).
        """
        r = tokens.size
        cached = self.n_rows
        d = self.model.config.d_model
        if within is None:
            within = np.eye(r, dtype=bool)
        x = self.model.embedding[tokens]
        for li, block in enumerate(self.model.blocks):
            xn = rms_norm(x)
            q = xn @ block.attention.wq.T
            k_self = xn @ block.attention.wk.T
            v_self = xn @ block.attention.wv.T
            k_cached = self._k_cache[li].view()
            v_cached = self._v_cache[li].view()
            scores = np.concatenate([q @ k_cached.T, q @ k_self.T], axis=1) / np.sqrt(d)
            mask = np.concatenate([allowed, within], axis=1)
            w = masked_softmax(scores, mask)
            att = w[:, :cached] @ v_cached + w[:, cached:] @ v_self
            x = x + att @ block.attention.wo.T
            self._k_cache[li].append(k_self)
            self._v_cache[li].append(v_self)
            moe_in = rms_norm(x)
            if moe_hook is None:
                out, _, _ = moe_forward_full_batch(block.moe, moe_in)
            else:
                out, _, _ = moe_hook(li, block.moe, moe_in)
            x = x + out
        self.n_rows += r
        return rms_norm(x) @ self.model.head.T

    def extend(self, tokens, parent_rows) -> np.ndarray:
        """Append one tree level and return its (r, vocab) logits.

        ``parent_rows`` holds, per new node, the absolute row index of its
        parent, or -1 for nodes hanging directly off the causal prefix.
        Rows within one extension never attend to each other.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        parent_rows = np.asarray(parent_rows, dtype=np.int64)
        cached = self.n_rows
        allowed = np.zeros((tokens.size, cached), dtype=bool)
        allowed[:, : self.causal_len] = True
        for i, p in enumerate(parent_rows):
            if p >= 0:
                allowed[i, self._allowed[p - self.causal_len]] = True
            self._allowed.append(np.append(np.nonzero(allowed[i])[0], cached + i))
        return self.run_rows(tokens, allowed)

    def extend_tree(self, tree, moe_hook=None) -> np.ndarray:
        """Append a whole drafted tree in one batch and return its logits.

        Every node attends to the full causal prefix, its ancestors within
        the batch, and itself. Valid only on a bare prefix.
        """
        if self.n_rows != self.causal_len:
            raise ValueError("extend_tree requires a bare causal prefix")
        m = tree.size
        allowed = np.ones((m, self.n_rows), dtype=bool)
        within = np.eye(m, dtype=bool)
        for i in range(m):
            p = int(tree.parents[i])
            if p >= 0:
                within[i] |= within[p]
        for i in range(m):
            self._allowed.append(
                np.concatenate(
                    [np.arange(self.causal_len), self.causal_len + np.nonzero(within[i])[0]]
                )
            )
        return self.run_rows(tree.tokens, allowed, within, moe_hook)

    def checkpoint(self) -> int:
        """Opaque marker for the current tree state."""
        return self.n_rows

    def rollback(self, marker: int) -> None:
        """Drop every row appended after ``marker``."""
        if not self.causal_len <= marker <= self.n_rows:
            raise ValueError("rollback marker out of range")
        for li in range(len(self._k_cache)):
            self._k_cache[li].length = marker
            self._v_cache[li].length = marker
        del self._allowed[marker - self.causal_len :]
        self.n_rows = marker

    def append_tokens(self, tokens) -> np.ndarray:
        """Grow the causal prefix by a run of tokens (causal among
        themselves); returns the last token's logits.

        Only valid when no tree rows are present (roll the tree back first).
        """
        if self.n_rows != self.causal_len:
            raise ValueError("cannot append to the prefix while tree rows exist")
        tokens = np.asarray(tokens, dtype=np.int64)
        r = tokens.size
        allowed = np.ones((r, self.n_rows), dtype=bool)
        logits = self.run_rows(tokens, allowed, within=causal_mask(r))
        self.causal_len += r
        self.context_logits = logits[-1]
        return logits[-1]


# ---------------------------------------------------------------------------
# Serialization: a small versioned binary container
# ---------------------------------------------------------------------------

_MAGIC = b"MOEM"
_FORMAT_VERSION = 1


def _model_arrays(model: MoEModel) -> list[tuple[str, np.ndarray]]:
    arrays = [("embedding", model.embedding), ("head", model.head)]
    for li, block in enumerate(model.blocks):
        a, m = block.attention, block.moe
        arrays += [
            (f"block{li}.wq", a.wq),
            (f"block{li}.wk", a.wk),
            (f"block{li}.wv", a.wv),
            (f"block{li}.wo", a.wo),
            (f"block{li}.router.w", m.router.w),
            (f"block{li}.router.bias", m.router.bias),
        ]
        for ei, e in enumerate(m.experts):
            arrays += [
                (f"block{li}.expert{ei}.w_in", e.w_in),
                (f"block{li}.expert{ei}.w_out", e.w_out),
            ]
    return arrays


def save_model(model: MoEModel, path) -> None:
    """Write the model to a deterministic binary container.

    Layout: magic, format version, JSON header (config echo plus an array
    manifest of name/shape/offset), then raw little-endian float64 data.
    Identical models produce byte-identical files.
    """
    arrays = _model_arrays(model)
    manifest = []
    offset = 0
    for name, arr in arrays:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps(
        {
            "format_version": _FORMAT_VERSION,
            "config": model.config.__dict__,
            "arrays": manifest,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _FORMAT_VERSION, len(header)))
        f.write(header)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> MoEModel:
    """Inverse of ``save_model``; round-trips bit-exactly."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a model file: bad magic {magic!r}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        header = json.loads(f.read(header_len))
        blob = f.read()

    config = ModelConfig(**header["config"])
    data: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=start)
        data[entry["name"]] = arr.reshape(shape).astype(np.float64)

    blocks = []
    li = 0
    while f"block{li}.wq" in data:
        experts = []
        ei = 0
        while f"block{li}.expert{ei}.w_in" in data:
            experts.append(
                Expert(
                    w_in=data[f"block{li}.expert{ei}.w_in"],
                    w_out=data[f"block{li}.expert{ei}.w_out"],
                )
            )
            ei += 1
        blocks.append(
            TransformerBlock(
                attention=AttentionWeights(
                    wq=data[f"block{li}.wq"],
                    wk=data[f"block{li}.wk"],
                    wv=data[f"block{li}.wv"],
                    wo=data[f"block{li}.wo"],
                ),
                moe=MoELayerWeights(
                    router=RouterWeights(
                        w=data[f"block{li}.router.w"],
                        bias=data[f"block{li}.router.bias"],
                    ),
                    experts=experts,
                    renormalize=config.renormalize,
                    k=config.top_k,
                ),
            )
        )
        li += 1
    return MoEModel(
        config=config, embedding=data["embedding"], blocks=blocks, head=data["head"]
    )
