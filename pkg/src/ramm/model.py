"""Toy uni-modal encoders, contrastive projection heads, and the dual-stream
co-attention fusion stack extended with retrieval-attention.

All streams (the original sample plus r retrieved pairs) share layer weights.
Retrieval-attention runs single-query multi-head attention from the original
stream's CLS over the CLS rows of all streams and residually updates only the
original CLS; every other row of every stream passes through untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, ContractViolation, MissingArtifactError, StructureError
from .ops import Node
from .tensor import load_tensor, save_tensor

PAD, CLS, MASK, UNK = "[pad]", "[cls]", "[mask]", "[unk]"
SPECIALS = [PAD, CLS, MASK, UNK]

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class Vocab:
    """Word-level vocabulary with fixed special tokens at the front."""

    def __init__(self, words: list[str]):
        self.tokens = SPECIALS + [w for w in words if w not in SPECIALS]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def cls_id(self):
        return self.index[CLS]

    @property
    def mask_id(self):
        return self.index[MASK]

    @property
    def unk_id(self):
        return self.index[UNK]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tokens[: len(SPECIALS)] != SPECIALS:
            raise StructureError(f"{path}: vocabulary missing special tokens")
        return cls(tokens[len(SPECIALS) :])


def tokenize(text: str, vocab: Vocab, max_len: int) -> list[int]:
    """Lowercase, split on runs of [a-z0-9], map OOV to UNK, prepend CLS."""
    words = _TOKEN_RE.findall(text.lower())
    ids = [vocab.cls_id] + [vocab.index.get(w, vocab.unk_id) for w in words]
    return ids[:max_len]


@dataclass
class ModelConfig:
    vocab_size: int
    n_answers: int = 2
    d: int = 64
    n_head: int = 4
    l_fuse: int = 2
    l_text: int = 2
    l_image: int = 2
    d_proj: int = 32
    max_text_len: int = 32
    patch_grid: int = 2
    d_patch: int = 16
    d_ff: int | None = None
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        dims = [
            self.vocab_size, self.n_answers, self.d, self.n_head, self.l_fuse,
            self.l_text, self.l_image, self.d_proj, self.max_text_len,
            self.patch_grid, self.d_patch, self.d_ff,
        ]
        if any(v < 1 for v in dims):
            raise ConfigError("all model dimensions must be >= 1")
        if self.d % self.n_head != 0:
            raise ConfigError(f"d={self.d} not divisible by n_head={self.n_head}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def n_patches(self) -> int:
        return self.patch_grid**2

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


class DropoutPlan:
    """Deterministic dropout masks keyed by (seed, step, pass, site tag)."""

    def __init__(self, seed: int, rate: float, step: int = 0, pass_idx: int = 0):
        self.seed = seed
        self.rate = rate
        self.step = step
        self.pass_idx = pass_idx

    def at(self, step: int, pass_idx: int = 0) -> "DropoutPlan":
        return DropoutPlan(self.seed, self.rate, step, pass_idx)

    def mask(self, tag: str, shape) -> np.ndarray:
        key = f"{self.seed}|{self.step}|{self.pass_idx}|{tag}".encode()
        digest = hashlib.blake2b(key, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return (rng.random(shape) >= self.rate).astype(np.float64)


def _maybe_drop(x: Node, dctx: DropoutPlan | None, tag: str) -> Node:
    if dctx is None or dctx.rate <= 0.0:
        return x
    return ops.dropout(x, dctx.mask(tag, x.value.shape), dctx.rate)


# ---------------------------------------------------------------------------
# Parameters

ATTN_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Node]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def mat(name, rows, cols):
        # Glorot scaling; a fixed small std would crush signal at small d
        p[name] = rng.normal(0.0, math.sqrt(2.0 / (rows + cols)), size=(rows, cols))

    def vec(name, n, value=0.0):
        p[name] = np.full(n, value, dtype=np.float64)

    def attn(prefix):
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            mat(f"{prefix}.{w}", cfg.d, cfg.d)
            vec(f"{prefix}.{b}", cfg.d)

    def ln(prefix):
        vec(f"{prefix}.g", cfg.d, 1.0)
        vec(f"{prefix}.b", cfg.d)

    def ffn(prefix):
        mat(f"{prefix}.w1", cfg.d, cfg.d_ff)
        vec(f"{prefix}.b1", cfg.d_ff)
        mat(f"{prefix}.w2", cfg.d_ff, cfg.d)
        vec(f"{prefix}.b2", cfg.d)

    def block(prefix):
        attn(f"{prefix}.attn")
        ln(f"{prefix}.ln1")
        ffn(f"{prefix}.ffn")
        ln(f"{prefix}.ln2")

    mat("text.tok_emb", cfg.vocab_size, cfg.d)
    mat("text.pos_emb", cfg.max_text_len, cfg.d)
    for i in range(cfg.l_text):
        block(f"text.{i}")
    ln("text.lnf")

    mat("image.cls", 1, cfg.d)
    mat("image.patch_proj.w", cfg.d_patch, cfg.d)
    vec("image.patch_proj.b", cfg.d)
    mat("image.pos_emb", cfg.n_patches + 1, cfg.d)
    for i in range(cfg.l_image):
        block(f"image.{i}")
    ln("image.lnf")

    mat("proj.text.w", cfg.d, cfg.d_proj)
    vec("proj.text.b", cfg.d_proj)
    mat("proj.image.w", cfg.d, cfg.d_proj)
    vec("proj.image.b", cfg.d_proj)

    for i in range(cfg.l_fuse):
        for sub in ("self_w", "self_v", "cross_w", "cross_v", "ret_w", "ret_v"):
            attn(f"fuse.{i}.{sub}")
        for lname in ("ln_sw", "ln_sv", "ln_cw", "ln_cv", "ln_rw", "ln_rv",
                      "ln_fw", "ln_fv"):
            ln(f"fuse.{i}.{lname}")
        ffn(f"fuse.{i}.ffn_w")
        ffn(f"fuse.{i}.ffn_v")

    mat("vqa.w1", 2 * cfg.d, cfg.d)
    vec("vqa.b1", cfg.d)
    mat("vqa.w2", cfg.d, cfg.n_answers)
    vec("vqa.b2", cfg.n_answers)
    mat("itm.w1", 2 * cfg.d, cfg.d)
    vec("itm.b1", cfg.d)
    mat("itm.w2", cfg.d, 2)
    vec("itm.b2", 2)
    mat("mlm.w", cfg.d, cfg.vocab_size)
    vec("mlm.b", cfg.vocab_size)

    return {name: ops.param(arr.astype(dtype)) for name, arr in p.items()}


def reinit_group(params: dict[str, Node], prefix: str, seed: int) -> None:
    """Fresh random init for one parameter group (e.g. the answer head)."""
    rng = np.random.default_rng(seed)
    for name in sorted(params):
        if not name.startswith(prefix):
            continue
        node = params[name]
        if node.value.ndim == 2:
            node.value = rng.normal(0.0, 0.02, size=node.value.shape).astype(node.dtype)
        else:
            fill = 1.0 if name.endswith(".g") else 0.0
            node.value = np.full_like(node.value, fill)


def save_params(params: dict[str, Node], directory) -> None:
    """Directory of RAMMTEN1 files plus a plain-text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        arr = params[name].value
        save_tensor(arr.astype(np.float32), directory / f"{name}.ten")
        lines.append(name + " " + " ".join(str(d) for d in arr.shape))
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(directory, dtype=np.float32) -> dict[str, Node]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise MissingArtifactError(f"no weights manifest at {manifest}")
    params: dict[str, Node] = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, *dims = line.split()
        t = load_tensor(directory / f"{name}.ten")
        if tuple(int(d) for d in dims) != t.shape:
            raise StructureError(f"{name}: manifest shape {dims} != file {t.shape}")
        params[name] = ops.param(t.array.astype(dtype))
    return params


# ---------------------------------------------------------------------------
# Forward passes


def _mha(params, prefix, x_q: Node, x_kv: Node, n_head: int,
         dctx=None, tag: str = "") -> Node:
    """Multi-head attention with output projection, queries from x_q."""
    d = x_q.value.shape[-1]
    dh = d // n_head
    q = ops.linear(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = ops.linear(x_kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = ops.linear(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    nq, nk = q.value.shape[0], k.value.shape[0]
    q3 = ops.transpose(ops.reshape(q, (nq, n_head, dh)), (1, 0, 2))
    k3 = ops.transpose(ops.reshape(k, (nk, n_head, dh)), (1, 0, 2))
    v3 = ops.transpose(ops.reshape(v, (nk, n_head, dh)), (1, 0, 2))
    out = ops.scaled_dot_attention(q3, k3, v3)
    out = ops.reshape(ops.transpose(out, (1, 0, 2)), (nq, d))
    out = ops.linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return _maybe_drop(out, dctx, tag or prefix)


def _ln(params, prefix, x: Node) -> Node:
    return ops.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ffn(params, prefix, x: Node, dctx=None, tag: str = "") -> Node:
    h = ops.gelu(ops.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    out = ops.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return _maybe_drop(out, dctx, tag or prefix)


def _encoder_block(params, prefix, x: Node, n_head: int, dctx=None) -> Node:
    xn = _ln(params, f"{prefix}.ln1", x)
    x = ops.add(x, _mha(params, f"{prefix}.attn", xn, xn, n_head, dctx, f"{prefix}.attn"))
    x = ops.add(x, _ffn(params, f"{prefix}.ffn", _ln(params, f"{prefix}.ln2", x),
                        dctx, f"{prefix}.ffn"))
    return x


def encode_text(params, cfg: ModelConfig, ids, dctx: DropoutPlan | None = None) -> Node:
    """Token + position embedding, then l_text pre-norm self-attention layers."""
    ids = list(ids)
    x = ops.gather_rows(params["text.tok_emb"], ids)
    x = ops.add(x, ops.slice_rows(params["text.pos_emb"], 0, len(ids)))
    for i in range(cfg.l_text):
        x = _encoder_block(params, f"text.{i}", x, cfg.n_head, dctx)
    return _ln(params, "text.lnf", x)


def encode_image(params, cfg: ModelConfig, patches, dctx: DropoutPlan | None = None) -> Node:
    """Patch projection plus learned CLS slot, then l_image encoder layers."""
    patches = ops.as_node(patches)
    if patches.value.shape[-1] != cfg.d_patch:
        raise ops.ShapeError(
            f"patch dim {patches.value.shape[-1]} != configured {cfg.d_patch}"
        )
    proj = ops.linear(patches, params["image.patch_proj.w"], params["image.patch_proj.b"])
    x = ops.concat_rows([params["image.cls"], proj])
    x = ops.add(x, ops.slice_rows(params["image.pos_emb"], 0, x.value.shape[0]))
    for i in range(cfg.l_image):
        x = _encoder_block(params, f"image.{i}", x, cfg.n_head, dctx)
    return _ln(params, "image.lnf", x)


def project_itc(cls_row: Node, params, modality: str) -> Node:
    """Linear projection of a CLS row followed by L2 normalization."""
    if modality not in ("text", "image"):
        raise ConfigError(f"unknown modality {modality!r}")
    out = ops.linear(cls_row, params[f"proj.{modality}.w"], params[f"proj.{modality}.b"])
    return ops.l2_normalize_rows(out)


@dataclass
class FusionState:
    """(r+1) parallel dual-stream hidden states; stream 0 is the original."""

    text_streams: list[Node]
    image_streams: list[Node]
    layer_index: int = 0

    @property
    def r(self) -> int:
        return len(self.text_streams) - 1


def retrieval_attention(state: FusionState, params, cfg: ModelConfig,
                        layer: int, dctx: DropoutPlan | None = None) -> FusionState:
    """Single-query attention from stream 0's CLS over all streams' CLS rows.

    Output is added residually to stream 0's CLS only; every other position
    of every stream is returned as the same node, hence bitwise unchanged.
    """
    if state.r < 1:
        raise ContractViolation("retrieval_attention requires r >= 1 streams")

    def per_modality(streams: list[Node], sub: str, ln_name: str) -> list[Node]:
        normed = [
            _ln(params, f"fuse.{layer}.{ln_name}", ops.slice_rows(s, 0, 1))
            for s in streams
        ]
        keys = ops.concat_rows(normed)
        out = _mha(params, f"fuse.{layer}.{sub}", normed[0], keys, cfg.n_head,
                   dctx, f"fuse.{layer}.{sub}")
        s0 = streams[0]
        new0 = ops.concat_rows([
            ops.add(ops.slice_rows(s0, 0, 1), out),
            ops.slice_rows(s0, 1, s0.value.shape[0]),
        ])
        return [new0] + streams[1:]

    return FusionState(
        per_modality(state.text_streams, "ret_w", "ln_rw"),
        per_modality(state.image_streams, "ret_v", "ln_rv"),
        state.layer_index,
    )


def fusion_layer(state: FusionState, params, cfg: ModelConfig,
                 retrieval_enabled: bool, dctx: DropoutPlan | None = None) -> FusionState:
    """One dual-stream layer: self-attention, cross-attention, optional
    retrieval-attention, then per-modality feed-forward; residual + pre-norm
    around every sublayer. Streams share weights and are processed
    independently until retrieval-attention couples their CLS rows."""
    i = state.layer_index
    texts, images = [], []
    for j, (w, v) in enumerate(zip(state.text_streams, state.image_streams)):
        wn = _ln(params, f"fuse.{i}.ln_sw", w)
        w1 = ops.add(w, _mha(params, f"fuse.{i}.self_w", wn, wn, cfg.n_head,
                             dctx, f"fuse.{i}.self_w.s{j}"))
        vn = _ln(params, f"fuse.{i}.ln_sv", v)
        v1 = ops.add(v, _mha(params, f"fuse.{i}.self_v", vn, vn, cfg.n_head,
                             dctx, f"fuse.{i}.self_v.s{j}"))
        wc = _ln(params, f"fuse.{i}.ln_cw", w1)
        vc = _ln(params, f"fuse.{i}.ln_cv", v1)
        w2 = ops.add(w1, _mha(params, f"fuse.{i}.cross_w", wc, vc, cfg.n_head,
                              dctx, f"fuse.{i}.cross_w.s{j}"))
        v2 = ops.add(v1, _mha(params, f"fuse.{i}.cross_v", vc, wc, cfg.n_head,
                              dctx, f"fuse.{i}.cross_v.s{j}"))
        texts.append(w2)
        images.append(v2)

    mid = FusionState(texts, images, i)
    if retrieval_enabled and mid.r >= 1:
        mid = retrieval_attention(mid, params, cfg, i, dctx)

    texts2, images2 = [], []
    for j, (w, v) in enumerate(zip(mid.text_streams, mid.image_streams)):
        w3 = ops.add(w, _ffn(params, f"fuse.{i}.ffn_w", _ln(params, f"fuse.{i}.ln_fw", w),
                             dctx, f"fuse.{i}.ffn_w.s{j}"))
        v3 = ops.add(v, _ffn(params, f"fuse.{i}.ffn_v", _ln(params, f"fuse.{i}.ln_fv", v),
                             dctx, f"fuse.{i}.ffn_v.s{j}"))
        texts2.append(w3)
        images2.append(v3)
    return FusionState(texts2, images2, i + 1)


def fuse(params, cfg: ModelConfig, text0: Node, image0: Node,
         retrieved: list[tuple[Node, Node]],
         dctx: DropoutPlan | None = None) -> tuple[Node, Node]:
    """Run the full fusion stack; returns final stream-0 representations.

    With no retrieved pairs the retrieval-attention sublayer is skipped
    entirely, so the r=0 path is the plain co-attention model bit-for-bit.
    """
    state = FusionState(
        [text0] + [t for t, _ in retrieved],
        [image0] + [v for _, v in retrieved],
    )
    enabled = len(retrieved) > 0
    for _ in range(cfg.l_fuse):
        state = fusion_layer(state, params, cfg, enabled, dctx)
    return state.text_streams[0], state.image_streams[0]


def _cls_pair(w_cls: Node, v_cls: Node) -> Node:
    """Concatenate two (1,d) CLS rows into a (1,2d) feature row."""
    return ops.transpose(ops.concat_rows([ops.transpose(w_cls), ops.transpose(v_cls)]))


def _mlp_head(params, prefix, x: Node) -> Node:
    h = ops.gelu(ops.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ops.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def vqa_head(params, w_cls: Node, v_cls: Node) -> Node:
    """Two-layer MLP over the concatenated fused CLS pair -> answer logits."""
    return _mlp_head(params, "vqa", _cls_pair(w_cls, v_cls))


def itm_head(params, w_cls: Node, v_cls: Node) -> Node:
    return _mlp_head(params, "itm", _cls_pair(w_cls, v_cls))


def mlm_head(params, w_states: Node) -> Node:
    """Per-position vocabulary logits from fused text states."""
    return ops.linear(w_states, params["mlm.w"], params["mlm.b"])
