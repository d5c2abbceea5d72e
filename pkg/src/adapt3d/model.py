"""The slice-transformer network.

Per-slice patch embeddings plus a guide embedding computed from all slices
stacked as channels, a learned positional table, one class token per view
replicated to that view's slices, then four encoder stages:

  1. a weight-shared self-attention stack over every slice sequence,
  2. per-view self-attention stacks,
  3. per-view cross-attention stacks whose entry fuses the view's slices,
  4. per-view cross-attention stacks over the three reduced view sequences,
     fused across views at entry.

The three final class tokens are concatenated, layer-normalized, and mapped
to two logits. Blocks are pre-norm residual with a gelu MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor
from .slicer import SliceStack, default_bounds

STAGES = ("sae", "dsae", "intra", "inter")


@dataclass(frozen=True)
class AdaptConfig:
    image_extent: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 4
    layers: tuple[int, int, int, int] = (1, 1, 2, 2)
    mlp_ratio: int = 4
    n_total: int = 12
    n_min: int = 1
    n_max: int = 10
    n_classes: int = 2

    def __post_init__(self):
        if self.image_extent % self.patch_size:
            raise ValueError(
                f"image extent {self.image_extent} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if len(self.layers) != 4 or any(l < 1 for l in self.layers):
            raise ValueError("layers must be four positive counts")
        if self.n_min < 1 or not 3 * self.n_min <= self.n_total <= 3 * self.n_max:
            raise ValueError("slice bounds are infeasible")
        if self.n_classes != 2:
            raise ValueError("binary classification only")

    @property
    def grid(self):
        return self.image_extent // self.patch_size

    @property
    def tokens_per_slice(self):
        return self.grid**2

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def full_scale(cls):
        """The reference full-scale geometry (224^3 input, 48 slices)."""
        n_min, n_max = default_bounds(48)
        return cls(
            image_extent=224,
            patch_size=16,
            embed_dim=256,
            heads=4,
            layers=(1, 1, 2, 2),
            mlp_ratio=4,
            n_total=48,
            n_min=n_min,
            n_max=n_max,
        )


def _trunc_normal(rng, shape, dtype, std=0.02):
    a = rng.normal(0.0, std, size=shape)
    np.clip(a, -2 * std, 2 * std, out=a)
    return Tensor(a.astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in, d_out, dtype):
        self.w = _trunc_normal(rng, (d_in, d_out), dtype)
        self.b = _zeros((d_out,), dtype)

    def __call__(self, x):
        return nm.add(nm.matmul(x, self.w), self.b)

    def named(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class EncoderLayer:
    """Pre-norm multi-head self-attention block with a gelu MLP.

    ``sink``, when given, receives the post-softmax class-token attention
    rows and the class token's attended (pre output-projection) vectors as
    plain arrays of shape [..., heads, T] and [..., heads, head_dim].
    """

    def __init__(self, rng, dim, heads, mlp_ratio, dtype):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.ln1_g = _ones((dim,), dtype)
        self.ln1_b = _zeros((dim,), dtype)
        self.q = Linear(rng, dim, dim, dtype)
        self.k = Linear(rng, dim, dim, dtype)
        self.v = Linear(rng, dim, dim, dtype)
        self.o = Linear(rng, dim, dim, dtype)
        self.ln2_g = _ones((dim,), dtype)
        self.ln2_b = _zeros((dim,), dtype)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim, dtype)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim, dtype)

    def __call__(self, x, sink=None):
        lead = x.shape[:-2]
        nlead = len(lead)
        seq_len = x.shape[-2]
        h, hd = self.heads, self.head_dim
        swap_ht = tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2)
        swap_last = tuple(range(nlead + 1)) + (nlead + 2, nlead + 1)

        normed = nm.layer_norm(x, self.ln1_g, self.ln1_b)

        def to_heads(t):
            return nm.transpose(nm.reshape(t, lead + (seq_len, h, hd)), swap_ht)

        q = to_heads(self.q(normed))
        k = to_heads(self.k(normed))
        v = to_heads(self.v(normed))
        scores = nm.scale(nm.matmul(q, nm.transpose(k, swap_last)), 1.0 / math.sqrt(hd))
        attn = nm.softmax(scores, axis=-1)
        ctx = nm.matmul(attn, v)
        if sink is not None:
            sink(attn.data[..., 0, :].copy(), ctx.data[..., 0, :].copy())
        merged = nm.reshape(nm.transpose(ctx, swap_ht), lead + (seq_len, self.dim))
        x = nm.add(x, self.o(merged))
        normed2 = nm.layer_norm(x, self.ln2_g, self.ln2_b)
        return nm.add(x, self.fc2(nm.gelu(self.fc1(normed2))))

    def named(self, prefix):
        yield f"{prefix}.ln1.g", self.ln1_g
        yield f"{prefix}.ln1.b", self.ln1_b
        yield from self.q.named(f"{prefix}.q")
        yield from self.k.named(f"{prefix}.k")
        yield from self.v.named(f"{prefix}.v")
        yield from self.o.named(f"{prefix}.o")
        yield f"{prefix}.ln2.g", self.ln2_g
        yield f"{prefix}.ln2.b", self.ln2_b
        yield from self.fc1.named(f"{prefix}.fc1")
        yield from self.fc2.named(f"{prefix}.fc2")


class AttentionRecord:
    """Class-token attention rows and attended vectors per encoder stage.

    ``rows[stage]`` and ``attended[stage]`` are lists with one array per
    view; rows are post-softmax and sum to 1 along their last axis.
    """

    def __init__(self):
        self.rows = {}
        self.attended = {}

    def store(self, stage, rows_per_view, attended_per_view):
        self.rows[stage] = rows_per_view
        self.attended[stage] = attended_per_view


def fusion_sequences(group, member_indices=None):
    """Entry transform of the cross-attention stages.

    Every member keeps its own class token (position 0) while its patch
    block is replaced by the sum of all members' patch blocks. The sum is
    accumulated in ascending member-index order, so passing the same
    members in a different order (with matching indices) is bitwise
    neutral. A singleton group is returned unchanged.
    """
    seqs = list(group)
    if not seqs:
        raise ShapeError("fusion group is empty")
    shape = seqs[0].shape
    if shape[-2] < 2:
        raise ShapeError("fusion needs a class token plus at least one patch token")
    for s in seqs[1:]:
        if s.shape != shape:
            raise ShapeError(f"heterogeneous shapes in fusion group: {s.shape} vs {shape}")
    if member_indices is None:
        member_indices = range(len(seqs))
    order = np.argsort(np.asarray(list(member_indices)), kind="stable")
    if len(order) != len(seqs):
        raise ValueError("member_indices must match the group size")
    axis = len(shape) - 2
    total = None
    for i in order:
        patches = nm.narrow(seqs[i], axis, 1, shape[-2] - 1)
        total = patches if total is None else nm.add(total, patches)
    fused = []
    for s in seqs:
        cls = nm.narrow(s, axis, 0, 1)
        fused.append(nm.concat([cls, total], axis=axis))
    return fused


def reduce_dimension(group, axis=1):
    """Positionwise mean over a view's slice sequences (class token included)."""
    if group.shape[axis] < 1:
        raise ShapeError("cannot reduce an empty view")
    return nm.mean(group, axis=axis)


class AdaptModel:
    """All learnable state plus the forward pass."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config
        d = c.embed_dim
        n = c.n_total
        patch_in = c.patch_size**2
        tokens = c.tokens_per_slice

        self.patch = Linear(rng, patch_in, d, self.dtype)
        self.guide = Linear(rng, patch_in * n, d, self.dtype)
        self.pos = _trunc_normal(rng, (n * (tokens + 1), d), self.dtype)
        self.cls = _trunc_normal(rng, (3, d), self.dtype)

        def stack(count):
            return [EncoderLayer(rng, d, c.heads, c.mlp_ratio, self.dtype) for _ in range(count)]

        self.sae = stack(c.layers[0])
        self.dsae = [stack(c.layers[1]) for _ in range(3)]
        self.intra = [stack(c.layers[2]) for _ in range(3)]
        self.inter = [stack(c.layers[3]) for _ in range(3)]
        self.final_g = _ones((3 * d,), self.dtype)
        self.final_b = _zeros((3 * d,), self.dtype)
        self.head = Linear(rng, 3 * d, c.n_classes, self.dtype)
        self._params = dict(self._named())

    def _named(self):
        yield from self.patch.named("patch")
        yield from self.guide.named("guide")
        yield "pos", self.pos
        yield "cls", self.cls
        for i, layer in enumerate(self.sae):
            yield from layer.named(f"sae.{i}")
        for name, stacks in (("dsae", self.dsae), ("intra", self.intra), ("inter", self.inter)):
            for t, stage in enumerate(stacks):
                for i, layer in enumerate(stage):
                    yield from layer.named(f"{name}.{t}.{i}")
        yield "final_ln.g", self.final_g
        yield "final_ln.b", self.final_b
        yield from self.head.named("head")

    def parameters(self):
        """Named parameter tensors in a fixed construction order."""
        return self._params

    def num_params(self):
        total = 0
        for p in self._params.values():
            total += p.size
        return total

    def _patchify(self, raw):
        """[..., E, E] -> [..., N, P*P] over non-overlapping patches."""
        p = self.config.patch_size
        g = self.config.grid
        lead = raw.shape[:-2]
        out = raw.reshape(lead + (g, p, g, p))
        out = np.moveaxis(out, -3, -2)
        return out.reshape(lead + (g * g, p * p))

    def patch_embed(self, slice2d):
        """Embed one 2D slice into [N, D] tokens."""
        arr = np.asarray(slice2d, dtype=self.dtype)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"expected a square slice, got {arr.shape}")
        if arr.shape[0] != self.config.image_extent:
            raise ShapeError(
                f"slice extent {arr.shape[0]} does not match config extent {self.config.image_extent}"
            )
        return self.patch(Tensor(self._patchify(arr)))

    def guide_embed(self, stack):
        """Embed all slices of a stack, stacked as channels, into [N, D]."""
        self._check_stack(stack)
        raw = stack.slices.astype(self.dtype)
        patches = self._patchify(raw)  # [n, N, P*P]
        channels = np.moveaxis(patches, 0, 1).reshape(
            self.config.tokens_per_slice, -1
        )
        return self.guide(Tensor(channels))

    def _check_stack(self, stack):
        c = self.config
        if stack.extent != c.image_extent:
            raise ShapeError(
                f"stack extent {stack.extent} does not match config extent {c.image_extent}"
            )
        if stack.allocation.n_total != c.n_total:
            raise ShapeError(
                f"stack has {stack.allocation.n_total} slices, config wants {c.n_total}"
            )

    def forward(self, stacks, record=None):
        """Logits for one stack ([2]) or a list of stacks ([B, 2]).

        All stacks in a batch must share one allocation. When ``record`` is
        given, the final layer of each stage stores its class-token
        attention there.
        """
        single = isinstance(stacks, SliceStack)
        stacks = [stacks] if single else list(stacks)
        if not stacks:
            raise ValueError("empty batch")
        for s in stacks:
            self._check_stack(s)
        counts = stacks[0].allocation.counts
        if any(x < 1 for x in counts):
            raise ShapeError(f"every view needs at least one slice, got {counts}")
        for s in stacks[1:]:
            if s.allocation.counts != counts:
                raise ShapeError("all stacks in a batch must share one allocation")

        c = self.config
        d = c.embed_dim
        n = c.n_total
        tokens = c.tokens_per_slice
        b = len(stacks)
        raw = np.stack([s.slices for s in stacks]).astype(self.dtype)  # [B, n, E, E]
        patches = self._patchify(raw)  # [B, n, N, P*P]
        guide_in = np.moveaxis(patches, 1, 2).reshape(b, tokens, -1)

        tok = self.patch(Tensor(patches))  # [B, n, N, D]
        guide = self.guide(Tensor(guide_in))  # [B, N, D]
        guide = nm.broadcast_to(nm.reshape(guide, (b, 1, tokens, d)), (b, n, tokens, d))
        tok = nm.add(tok, guide)

        cls_rows = []
        for view in range(3):
            cls_view = nm.reshape(nm.narrow(self.cls, 0, view, 1), (1, 1, 1, d))
            cls_rows.append(nm.broadcast_to(cls_view, (b, counts[view], 1, d)))
        seq = nm.concat([nm.concat(cls_rows, axis=1), tok], axis=2)  # [B, n, T, D]
        seq = nm.add(seq, nm.reshape(self.pos, (n, tokens + 1, d)))

        def run_stage(x, layers, sink):
            for i, layer in enumerate(layers):
                x = layer(x, sink=sink if i == len(layers) - 1 else None)
            return x

        def per_view_sink(store):
            def sink(rows, att):
                store.append((rows, att))
            return sink

        # stage 1: weight-shared encoders over every slice sequence
        sae_store = []
        seq = run_stage(seq, self.sae, per_view_sink(sae_store) if record else None)
        if record:
            rows, att = sae_store[0]
            record.store(
                "sae",
                _split_views(rows, counts, axis=1),
                _split_views(att, counts, axis=1),
            )

        # stage 2: per-view encoders, still per-slice
        chunks = nm.split(seq, counts, axis=1)
        store2 = [[] for _ in range(3)]
        chunks = [
            run_stage(chunks[t], self.dsae[t], per_view_sink(store2[t]) if record else None)
            for t in range(3)
        ]
        if record:
            record.store(
                "dsae",
                [store2[t][0][0] for t in range(3)],
                [store2[t][0][1] for t in range(3)],
            )

        # stage 3: fuse each view's slices at entry, then per-view encoders
        store3 = [[] for _ in range(3)]
        fused_chunks = []
        offset = 0
        for t in range(3):
            members = nm.split(chunks[t], [1] * counts[t], axis=1)
            members = fusion_sequences(members, range(offset, offset + counts[t]))
            offset += counts[t]
            fused = nm.concat(members, axis=1) if len(members) > 1 else members[0]
            fused_chunks.append(
                run_stage(fused, self.intra[t], per_view_sink(store3[t]) if record else None)
            )
        if record:
            record.store(
                "intra",
                [store3[t][0][0] for t in range(3)],
                [store3[t][0][1] for t in range(3)],
            )

        # reduce each view to one sequence, fuse across views, final encoders
        dims = [reduce_dimension(fused_chunks[t], axis=1) for t in range(3)]
        dims = fusion_sequences(dims)
        store4 = [[] for _ in range(3)]
        dims = [
            run_stage(dims[t], self.inter[t], per_view_sink(store4[t]) if record else None)
            for t in range(3)
        ]
        if record:
            record.store(
                "inter",
                [store4[t][0][0] for t in range(3)],
                [store4[t][0][1] for t in range(3)],
            )

        cls_out = [nm.reshape(nm.narrow(dims[t], 1, 0, 1), (b, d)) for t in range(3)]
        merged = nm.concat(cls_out, axis=1)  # [B, 3D]
        merged = nm.layer_norm(merged, self.final_g, self.final_b)
        logits = self.head(merged)
        if single:
            logits = nm.reshape(logits, (c.n_classes,))
        return logits


def _split_views(arr, counts, axis):
    out = np.split(arr, np.cumsum(counts)[:-1], axis=axis)
    return [np.ascontiguousarray(a) for a in out]


def attention_scores(record):
    """Per-view scores from the final cross-view stage.

    Each score is the mean over heads (and batch) of the Euclidean norm of
    the class token's attended vector; always nonnegative.
    """
    if "inter" not in record.attended:
        raise KeyError("record does not hold the final cross-view stage")
    out = []
    for att in record.attended["inter"]:
        norms = np.linalg.norm(np.asarray(att, dtype=np.float64), axis=-1)
        out.append(float(norms.mean()))
    return np.asarray(out)


def param_count_breakdown(config):
    """Closed-form parameter counts per component.

    One encoder layer holds 4 attention projections and 2 MLP mats with
    biases plus two layer norms: 12*D^2 + 13*D parameters at mlp_ratio 4.
    """
    c = config
    d = c.embed_dim
    n = c.n_total
    tokens = c.tokens_per_slice
    patch_in = c.patch_size**2
    per_layer = (
        4 * (d * d + d)  # q, k, v, o
        + (d * c.mlp_ratio * d + c.mlp_ratio * d)  # fc1
        + (c.mlp_ratio * d * d + d)  # fc2
        + 4 * d  # two layer norms
    )
    return {
        "patch_embed": (patch_in + 1) * d,
        "guide_embed": (patch_in * n + 1) * d,
        "positional_table": n * (tokens + 1) * d,
        "class_tokens": 3 * d,
        "sae_stack": c.layers[0] * per_layer,
        "dsae_stacks": 3 * c.layers[1] * per_layer,
        "intra_stacks": 3 * c.layers[2] * per_layer,
        "inter_stacks": 3 * c.layers[3] * per_layer,
        "final_norm": 2 * 3 * d,
        "head": (3 * d + 1) * c.n_classes,
    }


def param_count(config):
    """Exact scalar parameter count for a configuration."""
    total = 0
    for v in param_count_breakdown(config).values():
        total += v
    return total
