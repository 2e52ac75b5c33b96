"""Precomputed unit-norm projection vectors for a corpus, persisted
bit-exactly in the RAMMIDX1 binary format with a newline-separated UTF-8
caption sidecar."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BuildError, FingerprintMismatchError, FormatError, TruncatedFileError
from .model import ModelConfig, encode_image, encode_text, project_itc, tokenize
from .ops import Node

MAGIC = b"RAMMIDX1"
VERSION = 1

SOURCE_TAGS = {"PMCPM": 0, "ROCO": 1, "MIMIC_CXR": 2, "SYNTH": 3, "OTHER": 4}
TAG_NAMES = {v: k for k, v in SOURCE_TAGS.items()}

_REC = struct.Struct("<QBQ")  # pair_id, source_tag, caption_offset


def fingerprint_params(params: dict[str, Node], d_proj: int) -> int:
    """64-bit hash of the frozen projection-head weights plus d_proj.

    An index answers queries only for the exact encoders that built it;
    this makes a silent encoder swap a loud error instead.
    """
    h = hashlib.blake2b(digest_size=8)
    for name in ("proj.text.w", "proj.text.b", "proj.image.w", "proj.image.b"):
        h.update(name.encode())
        h.update(params[name].value.astype("<f4").tobytes())
    h.update(struct.pack("<H", d_proj))
    return int.from_bytes(h.digest(), "little")


@dataclass
class EmbeddingIndex:
    d_proj: int
    fingerprint: int
    pair_ids: np.ndarray          # (n,) uint64
    source_tags: np.ndarray       # (n,) uint8
    text_vecs: np.ndarray         # (n, d_proj) float32
    image_vecs: np.ndarray        # (n, d_proj) float32
    captions: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.pair_ids.shape[0])

    def caption_of(self, pair_id: int) -> str:
        idx = np.nonzero(self.pair_ids == np.uint64(pair_id))[0]
        if idx.size == 0:
            raise KeyError(f"pair_id {pair_id} not in index")
        return self.captions[int(idx[0])]

    def row_of(self, pair_id: int) -> int:
        idx = np.nonzero(self.pair_ids == np.uint64(pair_id))[0]
        if idx.size == 0:
            raise KeyError(f"pair_id {pair_id} not in index")
        return int(idx[0])

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.pair_ids.tobytes())
        h.update(self.source_tags.tobytes())
        h.update(self.text_vecs.tobytes())
        h.update(self.image_vecs.tobytes())
        h.update("\n".join(self.captions).encode("utf-8"))
        return h.hexdigest()


@dataclass
class BuildReport:
    encoded: int = 0
    skipped: int = 0
    skipped_ids: list[int] = field(default_factory=list)


def build_store(pairs, params, cfg: ModelConfig, vocab, load_patches=None
                ) -> tuple[EmbeddingIndex, BuildReport]:
    """Encode every corpus pair once with frozen encoders (dropout off).

    `pairs` yields objects with pair_id, source_tag, caption, and either an
    in-memory `patches` array or an `image_ref` resolvable by load_patches.
    Undecodable pairs are skipped and counted; duplicate ids abort the build.
    """
    report = BuildReport()
    ids: list[int] = []
    tags: list[int] = []
    captions: list[str] = []
    tvecs: list[np.ndarray] = []
    ivecs: list[np.ndarray] = []
    seen: set[int] = set()
    for pair in pairs:
        pid = int(pair.pair_id)
        if pid in seen:
            raise BuildError(f"duplicate pair_id {pid}")
        seen.add(pid)
        try:
            patches = getattr(pair, "patches", None)
            if patches is None:
                patches = load_patches(pair.image_ref)
            token_ids = tokenize(pair.caption, vocab, cfg.max_text_len)
            w = encode_text(params, cfg, token_ids)
            v = encode_image(params, cfg, patches)
        except Exception:
            report.skipped += 1
            report.skipped_ids.append(pid)
            continue
        from . import ops

        tvec = project_itc(ops.slice_rows(w, 0, 1), params, "text").value[0]
        ivec = project_itc(ops.slice_rows(v, 0, 1), params, "image").value[0]
        ids.append(pid)
        tags.append(SOURCE_TAGS.get(pair.source_tag, SOURCE_TAGS["OTHER"]))
        captions.append(pair.caption)
        tvecs.append(np.asarray(tvec, dtype=np.float32))
        ivecs.append(np.asarray(ivec, dtype=np.float32))
        report.encoded += 1
    n = len(ids)
    index = EmbeddingIndex(
        d_proj=cfg.d_proj,
        fingerprint=fingerprint_params(params, cfg.d_proj),
        pair_ids=np.asarray(ids, dtype=np.uint64),
        source_tags=np.asarray(tags, dtype=np.uint8),
        text_vecs=np.asarray(tvecs, dtype=np.float32).reshape(n, cfg.d_proj),
        image_vecs=np.asarray(ivecs, dtype=np.float32).reshape(n, cfg.d_proj),
        captions=captions,
    )
    return index, report


def sidecar_path(path) -> Path:
    return Path(str(path) + ".captions")


def save_index(index: EmbeddingIndex, path) -> None:
    """RAMMIDX1: magic | version u16 | d_proj u16 | count u64 | fingerprint
    u64 | count records | text vecs f32 | image vecs f32, all little-endian."""
    path = Path(path)
    blob = bytearray()
    offsets = []
    at = 0
    for cap in index.captions:
        offsets.append(at)
        encoded = cap.encode("utf-8") + b"\n"
        blob.extend(encoded)
        at += len(encoded)
    n = len(index)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HHQQ", VERSION, index.d_proj, n, index.fingerprint))
        for i in range(n):
            f.write(_REC.pack(int(index.pair_ids[i]), int(index.source_tags[i]),
                              offsets[i]))
        f.write(index.text_vecs.astype("<f4").tobytes())
        f.write(index.image_vecs.astype("<f4").tobytes())
    sidecar_path(path).write_bytes(bytes(blob))


def load_index(path) -> EmbeddingIndex:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    header = struct.Struct("<HHQQ")
    if len(raw) < 8 + header.size:
        raise TruncatedFileError(f"{path}: truncated header")
    version, d_proj, count, fingerprint = header.unpack_from(raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    at = 8 + header.size
    need = at + count * _REC.size + 2 * count * d_proj * 4
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, need {need}")
    ids = np.empty(count, dtype=np.uint64)
    tags = np.empty(count, dtype=np.uint8)
    offsets = np.empty(count, dtype=np.int64)
    for i in range(count):
        pid, tag, off = _REC.unpack_from(raw, at)
        ids[i], tags[i], offsets[i] = pid, tag, off
        at += _REC.size
    vec_bytes = count * d_proj * 4
    tvecs = np.frombuffer(raw[at : at + vec_bytes], dtype="<f4").reshape(count, d_proj)
    at += vec_bytes
    ivecs = np.frombuffer(raw[at : at + vec_bytes], dtype="<f4").reshape(count, d_proj)
    blob = sidecar_path(path).read_bytes()
    captions = []
    for off in offsets:
        end = blob.index(b"\n", int(off))
        captions.append(blob[int(off) : end].decode("utf-8"))
    return EmbeddingIndex(
        d_proj=int(d_proj),
        fingerprint=int(fingerprint),
        pair_ids=ids,
        source_tags=tags,
        text_vecs=tvecs.astype(np.float32),
        image_vecs=ivecs.astype(np.float32),
        captions=captions,
    )


def verify_fingerprint(index: EmbeddingIndex, params, d_proj: int) -> None:
    expected = fingerprint_params(params, d_proj)
    if index.fingerprint != expected:
        raise FingerprintMismatchError(
            f"index fingerprint {index.fingerprint:#018x} does not match the "
            f"current frozen encoders ({expected:#018x}); rebuild the index"
        )
