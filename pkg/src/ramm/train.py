"""End-to-end harness: pretraining, index building, retrieval-augmented
fine-tuning, evaluation, retrieval statistics, and the r-sweep.

Stages communicate through on-disk artifacts (checkpoint directories, the
RAMMIDX1 index, JSONL data files) and are reproducible bit-for-bit given the
same configs and seeds.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, MissingArtifactError
from .model import (
    DropoutPlan, ModelConfig, Vocab, encode_image, encode_text, fuse,
    init_params, itm_head, load_params, project_itc, reinit_group,
    save_params, tokenize, vqa_head,
)
from .objectives import (
    AdamW, TrainConfig, ema_update, itc_loss, itc_loss_distilled, itm_loss,
    mask_tokens, mlm_loss, pretrain_loss, rdrop_loss,
)
from .retrieval import Mode, retrieve_by_vector
from .store import (
    TAG_NAMES, build_store, load_index, save_index, verify_fingerprint,
)
from .synthetic import VQAItem, load_corpus, load_vqa_items
from .tensor import load_tensor

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _sub_seed(*parts) -> int:
    digest = hashlib.blake2b("|".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little") & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(directory, params, mcfg: ModelConfig, extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(params, directory / "weights")
    (directory / "config.json").write_text(mcfg.to_json(), encoding="utf-8")
    if extra:
        (directory / "meta.json").write_text(
            json.dumps(extra, sort_keys=True), encoding="utf-8")


def load_checkpoint(directory, dtype=np.float32):
    directory = Path(directory)
    cfg_path = directory / "config.json"
    if not cfg_path.exists():
        raise MissingArtifactError(f"no checkpoint at {directory}")
    mcfg = ModelConfig.from_json(cfg_path.read_text(encoding="utf-8"))
    params = load_params(directory / "weights", dtype=dtype)
    return params, mcfg


def clone_params(params: dict[str, ops.Node]) -> dict[str, ops.Node]:
    return {n: ops.param(p.value.copy()) for n, p in params.items()}


# ---------------------------------------------------------------------------
# Pretraining


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation with no fixed point (mismatched caption assignment)."""
    if n < 2:
        raise ConfigError("need at least 2 samples to build mismatches")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def pretrain(data_dir, out_dir, mcfg: ModelConfig, tcfg: TrainConfig,
             steps: int, log_path=None) -> Path:
    """Train ITC + ITM + MLM (unweighted sum) with momentum distillation."""
    data_dir = Path(data_dir)
    vocab = Vocab.load(data_dir / "vocab.txt")
    pairs, load_patches = load_corpus(data_dir)
    if len(pairs) < tcfg.batch_size:
        raise ConfigError("corpus smaller than batch size")
    token_ids = [tokenize(p.caption, vocab, mcfg.max_text_len) for p in pairs]
    patches = [load_patches(p.image_ref) for p in pairs]

    params = init_params(mcfg, tcfg.seed)
    momentum = clone_params(params)
    opt = AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay,
                total_steps=steps)
    rng = np.random.default_rng(_sub_seed(tcfg.seed, "pretrain"))
    base_plan = DropoutPlan(_sub_seed(tcfg.seed, "dropout"), mcfg.dropout_rate)
    log_lines = []

    for step in range(steps):
        batch = rng.choice(len(pairs), size=tcfg.batch_size, replace=False)
        dctx = base_plan.at(step)
        text_states, image_states, tprojs, iprojs = [], [], [], []
        for bi in batch:
            w = encode_text(params, mcfg, token_ids[bi], dctx)
            v = encode_image(params, mcfg, patches[bi], dctx)
            text_states.append(w)
            image_states.append(v)
            tprojs.append(project_itc(ops.slice_rows(w, 0, 1), params, "text"))
            iprojs.append(project_itc(ops.slice_rows(v, 0, 1), params, "image"))
        tmat = ops.concat_rows(tprojs)
        imat = ops.concat_rows(iprojs)
        if tcfg.distill_weight > 0.0:
            tm, im = [], []
            for bi in batch:
                wm = encode_text(momentum, mcfg, token_ids[bi])
                vm = encode_image(momentum, mcfg, patches[bi])
                tm.append(project_itc(ops.slice_rows(wm, 0, 1), momentum, "text").value)
                im.append(project_itc(ops.slice_rows(vm, 0, 1), momentum, "image").value)
            loss_itc = itc_loss_distilled(
                tmat, imat, np.concatenate(tm), np.concatenate(im),
                tcfg.itc_temperature, tcfg.distill_weight)
        else:
            loss_itc = itc_loss(tmat, imat, tcfg.itc_temperature)

        # ITM: matched pairs plus derangement-shuffled caption negatives
        perm = _derangement(len(batch), rng)
        itm_logits, itm_labels = [], []
        for pos, bi in enumerate(batch):
            wl, vl = fuse(params, mcfg, text_states[pos], image_states[pos], [], dctx)
            itm_logits.append(itm_head(params, ops.slice_rows(wl, 0, 1),
                                       ops.slice_rows(vl, 0, 1)))
            itm_labels.append(1)
            wl, vl = fuse(params, mcfg, text_states[perm[pos]], image_states[pos],
                          [], dctx)
            itm_logits.append(itm_head(params, ops.slice_rows(wl, 0, 1),
                                       ops.slice_rows(vl, 0, 1)))
            itm_labels.append(0)
        loss_itm = itm_loss(ops.concat_rows(itm_logits), itm_labels)

        # MLM over corrupted captions fused with their images
        mlm_losses = []
        for pos, bi in enumerate(batch):
            corrupted, positions, targets = mask_tokens(
                token_ids[bi], tcfg.mask_rate, _sub_seed(tcfg.seed, step, int(bi)),
                vocab)
            wc = encode_text(params, mcfg, corrupted, dctx)
            wl, _ = fuse(params, mcfg, wc, image_states[pos], [], dctx)
            mlm_losses.append(mlm_loss(wl, params, positions, targets))
        loss_mlm = mlm_losses[0]
        for extra in mlm_losses[1:]:
            loss_mlm = ops.add(loss_mlm, extra)
        loss_mlm = ops.scale(loss_mlm, 1.0 / len(mlm_losses))

        total = pretrain_loss(loss_itc, loss_itm, loss_mlm)
        ops.zero_grads(params.values())
        ops.backward(total)
        lr = opt.step()
        ema_update(momentum, params, tcfg.momentum)
        log_lines.append(
            f"{step}\t{float(loss_itc.value):.6f}\t{float(loss_itm.value):.6f}"
            f"\t{float(loss_mlm.value):.6f}\t{float(total.value):.6f}\t{lr:.6g}")

    out_dir = Path(out_dir)
    save_checkpoint(out_dir, params, mcfg,
                    extra={"stage": "pretrain", "seed": tcfg.seed, "steps": steps})
    log_text = "\n".join(log_lines) + "\n"
    (out_dir / "train_log.tsv").write_text(log_text, encoding="utf-8")
    if log_path:
        Path(log_path).write_text(log_text, encoding="utf-8")
    return out_dir


def build_index_cmd(checkpoint_dir, data_dir, out_path) -> Path:
    params, mcfg = load_checkpoint(checkpoint_dir)
    data_dir = Path(data_dir)
    vocab = Vocab.load(data_dir / "vocab.txt")
    pairs, load_patches = load_corpus(data_dir)
    index, report = build_store(pairs, params, mcfg, vocab, load_patches)
    save_index(index, out_path)
    return Path(out_path)


# ---------------------------------------------------------------------------
# Fine-tuning


@dataclass
class FrozenSample:
    """Cached inference-mode uni-modal states for one text/image payload."""

    text: ops.Node
    image: ops.Node


class UnimodalCache:
    """Frozen-encoder forward results, computed once per unique payload."""

    def __init__(self, params, mcfg: ModelConfig, vocab: Vocab):
        self.params = params
        self.mcfg = mcfg
        self.vocab = vocab
        self._texts: dict[str, ops.Node] = {}
        self._images: dict[str, ops.Node] = {}

    def text(self, key: str, raw: str) -> ops.Node:
        if key not in self._texts:
            ids = tokenize(raw, self.vocab, self.mcfg.max_text_len)
            self._texts[key] = ops.constant(
                encode_text(self.params, self.mcfg, ids).value)
        return self._texts[key]

    def image(self, key: str, patches: np.ndarray) -> ops.Node:
        if key not in self._images:
            self._images[key] = ops.constant(
                encode_image(self.params, self.mcfg, patches).value)
        return self._images[key]


def _load_answers(data_dir) -> list[str]:
    path = Path(data_dir) / "answers.txt"
    if not path.exists():
        raise MissingArtifactError(f"no answer vocabulary at {path}")
    return path.read_text(encoding="utf-8").splitlines()


def finetune(checkpoint_dir, index_path, data_dir, r: int, tcfg: TrainConfig,
             out_dir, epochs: int = 10, train_unimodal: bool = False,
             feature_noise: float = 0.0) -> Path:
    """Fine-tune VQA classification with r retrieved pairs per instance.

    Retrieval scores come from the frozen pretraining-time encoders via the
    precomputed index. By default the uni-modal encoders are also frozen as
    feature extractors (their states are cached), which keeps desk-scale
    runs fast; pass train_unimodal=True to update them too. feature_noise
    adds fresh Gaussian noise to the instance's image states every step, a
    cheap augmentation that discourages memorizing individual images.
    """
    if r < 0:
        raise ConfigError("r must be non-negative")
    data_dir = Path(data_dir)
    params, mcfg = load_checkpoint(checkpoint_dir)
    index = load_index(index_path)
    verify_fingerprint(index, params, mcfg.d_proj)
    vocab = Vocab.load(data_dir / "vocab.txt")
    answers = _load_answers(data_dir)
    if mcfg.n_answers != len(answers):
        raise ConfigError(
            f"checkpoint expects {mcfg.n_answers} answers, data has {len(answers)}")
    answer_id = {a: i for i, a in enumerate(answers)}
    items = load_vqa_items(data_dir / "vqa_train.jsonl")
    corpus_pairs, load_patches = load_corpus(data_dir)
    pair_by_id = {p.pair_id: p for p in corpus_pairs}

    reinit_group(params, "vqa.", _sub_seed(tcfg.seed, "vqa-head"))
    cache = UnimodalCache(params, mcfg, vocab)

    # Per-item query vectors (frozen) and item payload caches
    item_text: list[ops.Node] = []
    item_image: list[ops.Node] = []
    item_tokens: list[list[int]] = []
    item_patches: list[np.ndarray] = []
    item_qvec: list[np.ndarray] = []
    for it in items:
        patches = load_tensor(data_dir / it.image_ref).array
        item_tokens.append(tokenize(it.question, vocab, mcfg.max_text_len))
        item_patches.append(patches)
        item_text.append(cache.text(f"q{it.item_id}", it.question))
        img = cache.image(it.image_ref, patches)
        item_image.append(img)
        qvec = project_itc(ops.constant(img.value[0:1]), params, "image").value[0]
        item_qvec.append(qvec)

    def retrieved_streams(it: VQAItem, qvec, step: int):
        if r == 0:
            return []
        result = retrieve_by_vector(
            qvec, index, r, Mode.TRAIN,
            seed=_sub_seed(tcfg.seed, "select", step, it.item_id))
        streams = []
        for pid, _ in result.selected:
            pair = pair_by_id[pid]
            streams.append((
                cache.text(f"p{pid}", pair.caption),
                cache.image(pair.image_ref, load_patches(pair.image_ref)),
            ))
        return streams

    trainable = None if train_unimodal else ("fuse.", "vqa.")
    steps_per_epoch = max(1, len(items) // tcfg.batch_size)
    total_steps = epochs * steps_per_epoch
    opt = AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay,
                total_steps=total_steps, trainable_prefixes=trainable)
    ema = clone_params(params)
    ema_init = {n: params[n].value.astype(np.float64).copy() for n in opt.names}
    base_plan = DropoutPlan(_sub_seed(tcfg.seed, "ft-dropout"), mcfg.dropout_rate)
    rng = np.random.default_rng(_sub_seed(tcfg.seed, "ft-order"))
    use_rdrop = tcfg.rdrop_alpha > 0.0 and mcfg.dropout_rate > 0.0
    log_lines = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        for b0 in range(0, steps_per_epoch * tcfg.batch_size, tcfg.batch_size):
            batch = order[b0 : b0 + tcfg.batch_size]
            losses = []
            for idx in batch:
                it = items[int(idx)]
                target = [answer_id[it.answer]]
                streams = retrieved_streams(it, item_qvec[int(idx)], step)
                if train_unimodal:
                    # live encoder forward so gradients reach the encoders
                    text_in = encode_text(params, mcfg, item_tokens[int(idx)])
                    image_in = encode_image(params, mcfg, item_patches[int(idx)])
                else:
                    text_in = item_text[int(idx)]
                    image_in = item_image[int(idx)]
                if feature_noise > 0.0:
                    noise_rng = np.random.default_rng(
                        _sub_seed(tcfg.seed, "aug", step, it.item_id))
                    noise = ops.constant(
                        feature_noise * noise_rng.normal(size=image_in.value.shape))
                    image_in = ops.add(image_in, noise)

                def forward(pass_idx: int) -> ops.Node:
                    dctx = base_plan.at(step, pass_idx)
                    wl, vl = fuse(params, mcfg, text_in,
                                  image_in, streams, dctx)
                    return vqa_head(params, ops.slice_rows(wl, 0, 1),
                                    ops.slice_rows(vl, 0, 1))

                if use_rdrop:
                    losses.append(rdrop_loss(forward(0), forward(1), target,
                                             tcfg.rdrop_alpha))
                else:
                    losses.append(ops.cross_entropy(forward(0), target))
            total = losses[0]
            for extra in losses[1:]:
                total = ops.add(total, extra)
            total = ops.scale(total, 1.0 / len(losses))
            ops.zero_grads(params.values())
            ops.backward(total)
            lr = opt.step()
            # restrict EMA to the optimized subset; frozen tensors must stay
            # bitwise identical so the index fingerprint remains valid
            ema_update({n: ema[n] for n in opt.names},
                       {n: params[n] for n in opt.names}, tcfg.ema_decay)
            log_lines.append(f"{step}\t{float(total.value):.6f}\t{lr:.6g}")
            step += 1

    out_dir = Path(out_dir)
    save_checkpoint(out_dir, params, mcfg, extra={
        "stage": "finetune", "seed": tcfg.seed, "r": r, "epochs": epochs,
        "index_fingerprint": index.fingerprint,
    })
    # Adam-style bias correction: the EMA starts cold at the initial weights,
    # which dominates short runs unless the decay^T leakage is divided out
    leak = tcfg.ema_decay ** max(step, 1)
    if leak < 1.0:
        for n in opt.names:
            corrected = (ema[n].value.astype(np.float64)
                         - leak * ema_init[n]) / (1.0 - leak)
            ema[n].value = corrected.astype(ema[n].value.dtype)
    save_params(ema, out_dir / "weights_ema")
    (out_dir / "train_log.tsv").write_text("\n".join(log_lines) + "\n",
                                           encoding="utf-8")
    return out_dir


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    overall: float
    closed: float
    open: float
    required: float
    not_required: float
    n_total: int
    n_closed: int
    n_open: int
    n_required: int
    r: int
    seed: int

    def as_text(self) -> str:
        return (
            f"r={self.r} seed={self.seed} n={self.n_total}\n"
            f"overall       {self.overall:.4f}\n"
            f"closed-ended  {self.closed:.4f} (n={self.n_closed})\n"
            f"open-ended    {self.open:.4f} (n={self.n_open})\n"
            f"retrieval-required      {self.required:.4f} (n={self.n_required})\n"
            f"not retrieval-required  {self.not_required:.4f}\n"
        )


def _acc(flags: list[bool]) -> float:
    return float(np.mean(flags)) if flags else 0.0


def evaluate(checkpoint_dir, index_path, data_dir, r: int, split: str = "test",
             use_ema: bool = True, out_dir=None, seed: int = 0):
    """Deterministic inference-mode evaluation; returns report and details."""
    data_dir = Path(data_dir)
    params, mcfg = load_checkpoint(checkpoint_dir)
    ema_dir = Path(checkpoint_dir) / "weights_ema"
    if use_ema and ema_dir.exists():
        params = load_params(ema_dir)
    index = load_index(index_path)
    verify_fingerprint(index, params, mcfg.d_proj)
    vocab = Vocab.load(data_dir / "vocab.txt")
    answers = _load_answers(data_dir)
    items = load_vqa_items(data_dir / f"vqa_{split}.jsonl")
    corpus_pairs, load_patches = load_corpus(data_dir)
    pair_by_id = {p.pair_id: p for p in corpus_pairs}
    cache = UnimodalCache(params, mcfg, vocab)

    details = []
    correct_flags, closed_flags, open_flags, req_flags, notreq_flags = [], [], [], [], []
    for it in items:
        patches = load_tensor(data_dir / it.image_ref).array
        wtext = cache.text(f"q{it.item_id}", it.question)
        wimg = cache.image(it.image_ref, patches)
        retrieved = []
        streams = []
        if r > 0:
            qvec = project_itc(ops.constant(wimg.value[0:1]), params, "image").value[0]
            result = retrieve_by_vector(qvec, index, r, Mode.INFER)
            for pid, s in result.selected:
                pair = pair_by_id[pid]
                row = index.row_of(pid)
                retrieved.append({
                    "pair_id": pid,
                    "source": TAG_NAMES[int(index.source_tags[row])],
                    "caption": pair.caption,
                    "s": s,
                })
                streams.append((
                    cache.text(f"p{pid}", pair.caption),
                    cache.image(pair.image_ref, load_patches(pair.image_ref)),
                ))
        wl, vl = fuse(params, mcfg, wtext, wimg, streams)
        logits = vqa_head(params, ops.slice_rows(wl, 0, 1), ops.slice_rows(vl, 0, 1))
        pred = answers[int(np.argmax(logits.value[0]))]
        ok = pred == it.answer
        correct_flags.append(ok)
        (closed_flags if it.closed else open_flags).append(ok)
        (req_flags if it.required else notreq_flags).append(ok)
        details.append({
            "item_id": it.item_id, "gold": it.answer, "pred": pred,
            "correct": ok, "closed": it.closed, "required": it.required,
            "retrieved": retrieved,
        })

    report = EvalReport(
        overall=_acc(correct_flags), closed=_acc(closed_flags),
        open=_acc(open_flags), required=_acc(req_flags),
        not_required=_acc(notreq_flags), n_total=len(items),
        n_closed=len(closed_flags), n_open=len(open_flags),
        n_required=len(req_flags), r=r, seed=seed,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval_report.txt").write_text(report.as_text(), encoding="utf-8")
        with open(out_dir / "eval_details.jsonl", "w", encoding="utf-8") as f:
            f.write(json.dumps({"report": report.__dict__}, sort_keys=True) + "\n")
            for d in details:
                f.write(json.dumps(d, sort_keys=True) + "\n")
    return report, details


# ---------------------------------------------------------------------------
# Retrieval statistics


@dataclass
class RetrievalStats:
    source_share: dict[str, float]      # percent of retrieved slots per source
    answer_containment: float           # percent of items with gold in a caption
    n_items: int

    def as_text(self) -> str:
        lines = [f"items evaluated  {self.n_items}"]
        for src, share in sorted(self.source_share.items()):
            lines.append(f"retrieve% {src:<10} {share:.1f}%")
        lines.append(f"have-answer%     {self.answer_containment:.1f}%")
        return "\n".join(lines) + "\n"


def caption_contains_answer(caption: str, answer: str) -> bool:
    """Case-insensitive whole-token match of the gold answer string."""
    answer_tokens = _TOKEN_RE.findall(answer.lower())
    caption_tokens = _TOKEN_RE.findall(caption.lower())
    if not answer_tokens:
        return False
    for start in range(len(caption_tokens) - len(answer_tokens) + 1):
        if caption_tokens[start : start + len(answer_tokens)] == answer_tokens:
            return True
    return False


def retrieval_stats(details: list[dict]) -> RetrievalStats:
    source_counts: dict[str, int] = {}
    total_slots = 0
    hits = 0
    n = 0
    for d in details:
        retrieved = d.get("retrieved", [])
        if not retrieved:
            continue
        n += 1
        for slot in retrieved:
            source_counts[slot["source"]] = source_counts.get(slot["source"], 0) + 1
            total_slots += 1
        if any(caption_contains_answer(slot["caption"], d["gold"])
               for slot in retrieved):
            hits += 1
    shares = {src: 100.0 * c / total_slots for src, c in source_counts.items()} \
        if total_slots else {}
    return RetrievalStats(shares, 100.0 * hits / n if n else 0.0, n)


def load_details(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(l) for l in lines[1:] if l.strip()]


# ---------------------------------------------------------------------------
# r-sweep


def sweep_r(checkpoint_dir, index_path, data_dir, rs, tcfg: TrainConfig,
            out_dir, epochs: int = 10) -> list[dict]:
    """Fine-tune and evaluate once per r on identical splits; one row per r."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in rs:
        ft_dir = out_dir / f"finetune_r{r}"
        finetune(checkpoint_dir, index_path, data_dir, r, tcfg, ft_dir, epochs)
        report, _ = evaluate(ft_dir, index_path, data_dir, r, seed=tcfg.seed)
        rows.append({
            "r": r, "overall": report.overall, "open": report.open,
            "closed": report.closed, "required": report.required,
            "seed": tcfg.seed,
        })
    header = f"# seed={tcfg.seed} epochs={epochs}\nr\toverall\topen\tclosed\trequired\n"
    body = "".join(
        f"{row['r']}\t{row['overall']:.4f}\t{row['open']:.4f}"
        f"\t{row['closed']:.4f}\t{row['required']:.4f}\n"
        for row in rows)
    (out_dir / "sweep_report.txt").write_text(header + body, encoding="utf-8")
    with open(out_dir / "sweep_report.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return rows
