"""Training loop (teacher forcing, Adam, clipping, checkpoints) and the
evaluation driver."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import Config
from .caption_decoder import CaptionModel, DecoderConfig, align_objects, beam_search
from .errors import OrgTrlError, ValidationError
from .feature_store import (
    Example,
    VideoRecord,
    Vocabulary,
    caption_examples,
    load_dataset,
    make_batch,
    sample_one_per_video,
)
from .metrics import ScoredCorpus, score_corpus, write_report
from .nn_substrate import ParameterStore
from .org_encoder import OrgConfig
from .trl_objectives import SoftTargetStore, ce_loss, combined_loss, kl_soft_loss

log = logging.getLogger(__name__)


class TrainingError(OrgTrlError):
    pass


@dataclass(frozen=True)
class RunPaths:
    out: Path
    data_dir: Path
    manifest: Path

    @classmethod
    def from_config(cls, cfg: Config, out: str | Path) -> "RunPaths":
        out = Path(out)
        data_dir = Path(cfg["data.dir"]) if cfg["data.dir"] else out / "data"
        manifest = Path(cfg["data.manifest"]) if cfg["data.manifest"] else data_dir / "manifest.json"
        return cls(out, data_dir, manifest)

    vocab = property(lambda self: self.out / "vocab.txt")
    elm = property(lambda self: self.out / "elm.json")
    soft_targets = property(lambda self: self.out / "soft_targets.bin")
    checkpoints = property(lambda self: self.out / "checkpoints")
    train_log = property(lambda self: self.out / "train_log.jsonl")
    captions = property(lambda self: self.out / "captions.tsv")
    metrics = property(lambda self: self.out / "metrics.json")
    metrics_per_video = property(lambda self: self.out / "metrics_per_video.tsv")

    def latest_checkpoint(self) -> Path:
        pointer = self.checkpoints / "latest.txt"
        if not pointer.exists():
            raise TrainingError(f"no checkpoint under {self.checkpoints}")
        return self.checkpoints / pointer.read_text().strip()


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 8
    epochs: int = 50
    seed: int = 13
    lam: float = 0.3
    temperature: float = 1.5
    k: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    explode: float = 1e4
    patience: int = 10
    objective: str = "trl"
    pairing: str = "per_caption"
    max_len: int = 24

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainConfig":
        return cls(lr=cfg["train.lr"], batch_size=cfg["train.batch"], epochs=cfg["train.epochs"],
                   seed=cfg["seed"], lam=cfg["trl.lambda"], temperature=cfg["trl.temperature"],
                   k=cfg["trl.k"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
                   eps=cfg["train.eps"], clip=cfg["train.clip"], explode=cfg["train.explode"],
                   patience=cfg["train.patience"], objective=cfg["train.objective"],
                   pairing=cfg["data.pairing"], max_len=cfg["vocab.max_len"])


@dataclass
class TrainLogEntry:
    epoch: int
    step: int
    ce: float
    kl: float | None
    loss: float
    grad_norm: float
    wall: float


def model_configs(cfg: Config) -> tuple[OrgConfig, DecoderConfig]:
    return (OrgConfig(cfg["org.mode"], cfg["org.top_k"], cfg["org.dim"]),
            DecoderConfig(cfg["decoder.hidden"], cfg["decoder.word_dim"], cfg["decoder.att_dim"],
                          cfg["decoder.beam"], cfg["decoder.max_len"]))


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@torch.no_grad()
def adam_step(params: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam; moments live in params.moments."""
    for name, p in params.items():
        if not bool(torch.isfinite(p.grad).all()):
            raise ValidationError(f"non-finite gradient for parameter {name!r}")
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if name not in params.moments:
            params.moments[name] = (torch.zeros_like(p), torch.zeros_like(p))
        m, v = params.moments[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + eps))


@torch.no_grad()
def clip_gradients(params: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm; return
    the norm before clipping."""
    total = math.sqrt(sum(float((p.grad.double() ** 2).sum()) for _, p in params.items()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in params.items():
            p.grad.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# Forward pass over a batch
# ---------------------------------------------------------------------------


def batch_losses(model: CaptionModel, records: Sequence[VideoRecord], alignments: Sequence[np.ndarray],
                 examples: Sequence[Example], store: SoftTargetStore | None, lam: float, use_trl: bool):
    """Teacher-forced losses for one batch: (loss, ce, kl or None)."""
    batch = make_batch([(records[e.video_index], e.tokens) for e in examples],
                       caption_ids=[e.caption_id for e in examples])
    align = np.stack([alignments[e.video_index] for e in examples])
    ctx = model.encode(batch.appearance, batch.motion, batch.objects, alignment=align)
    logp = model.teacher_forced(ctx, batch.tokens)
    targets, mask = batch.tokens[:, 1:], batch.mask[:, 1:]
    ce = ce_loss(logp, targets, mask)
    if not use_trl:
        return ce, ce, None
    ids, probs = store.batch_arrays(batch.caption_ids, mask)
    kl = kl_soft_loss(logp, ids, probs, mask)
    return combined_loss(ce, kl, lam), ce, kl


def _batches(examples: Sequence[Example], tc: TrainConfig, epoch: int) -> list[list[Example]]:
    rng = np.random.default_rng([tc.seed, epoch])
    pool = sample_one_per_video(examples, rng) if tc.pairing == "sample" else list(examples)
    order = rng.permutation(len(pool))
    return [[pool[i] for i in order[s : s + tc.batch_size]] for s in range(0, len(pool), tc.batch_size)]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CaptionModel
    log: list[TrainLogEntry]
    checkpoint: Path | None


def train(cfg: Config, paths: RunPaths, records: Sequence[VideoRecord] | None = None,
          vocab: Vocabulary | None = None) -> TrainResult:
    tc = TrainConfig.from_config(cfg)
    use_trl = tc.objective == "trl"
    store = None
    if use_trl:
        if paths.soft_targets.exists():
            store = SoftTargetStore.load(paths.soft_targets)
        elif tc.lam > 0:
            raise TrainingError(f"trl.lambda={tc.lam} needs a soft-target store at {paths.soft_targets}")
        else:
            use_trl = False
    records = load_dataset(paths.manifest) if records is None else records
    vocab = Vocabulary.load(paths.vocab) if vocab is None else vocab
    if store is not None and store.vocab_size != len(vocab):
        raise TrainingError("soft-target store was built for a different vocabulary")
    examples = caption_examples(records, vocab, tc.max_len)
    alignments = [align_objects(r.objects) for r in records]
    org_cfg, dec_cfg = model_configs(cfg)

    start_epoch = 0
    if cfg["train.resume"]:
        resume = Path(cfg["train.resume"])
        model = CaptionModel.load(resume)
        state = dict(line.split("=", 1) for line in (resume / "trainer.cfg").read_text().split())
        start_epoch = int(state["epoch"])
    else:
        r0 = records[0]
        model = CaptionModel.create(len(vocab), r0.appearance.shape[1], r0.motion.shape[1],
                                    r0.objects.shape[2], org_cfg, dec_cfg, seed=tc.seed)
    params = model.params

    val_records = None
    if cfg["train.val_manifest"]:
        val_records = load_dataset(cfg["train.val_manifest"])
    best_cider, stale = -math.inf, 0

    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    entries: list[TrainLogEntry] = []
    log_mode = "a" if start_epoch else "w"
    last_ckpt = None
    t0 = time.perf_counter()
    with open(paths.train_log, log_mode) as log_file:
        for epoch in range(start_epoch, tc.epochs):
            for batch_examples in _batches(examples, tc, epoch):
                loss, ce, kl = batch_losses(model, records, alignments, batch_examples, store, tc.lam, use_trl)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch + 1}")
                params.zero_grad()
                loss.backward()
                norm = clip_gradients(params, tc.clip)
                if norm > tc.explode:
                    raise TrainingError(f"gradient norm {norm:.3g} exceeds {tc.explode:g}")
                adam_step(params, tc.lr, tc.beta1, tc.beta2, tc.eps)
                entry = TrainLogEntry(epoch + 1, params.step_count, ce.item(),
                                      None if kl is None else kl.item(), loss.item(), norm,
                                      round(time.perf_counter() - t0, 3))
                entries.append(entry)
                log_file.write(json.dumps(asdict(entry)) + "\n")
            last_ckpt = save_checkpoint(model, paths, epoch + 1)

            if val_records is not None:
                captions = caption_records(model, val_records, vocab, beam=1, max_len=dec_cfg.max_len)
                score = evaluate_captions(val_records, captions)["cider"]
                log.info("epoch %d validation CIDEr %.4f", epoch + 1, score)
                if score > best_cider:
                    best_cider, stale = score, 0
                else:
                    stale += 1
                    if stale >= tc.patience:
                        log.info("early stop after epoch %d", epoch + 1)
                        break
    return TrainResult(model, entries, last_ckpt)


def save_checkpoint(model: CaptionModel, paths: RunPaths, epoch: int) -> Path:
    name = f"epoch_{epoch:03d}"
    d = paths.checkpoints / name
    model.save(d)
    (d / "trainer.cfg").write_text(f"epoch={epoch}\nstep={model.params.step_count}\n")
    (paths.checkpoints / "latest.txt").write_text(name + "\n")
    return d


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def caption_records(model: CaptionModel, records: Sequence[VideoRecord], vocab: Vocabulary,
                    beam: int | None = None, max_len: int | None = None) -> list[str]:
    beam = model.dec_cfg.beam if beam is None else beam
    max_len = model.dec_cfg.max_len if max_len is None else max_len
    out = []
    for rec in records:
        ctx = model.encode(rec.appearance[None], rec.motion[None], rec.objects[None])
        out.append(vocab.decode(beam_search(model, ctx, beam, max_len).content))
    return out


def evaluate_captions(records: Sequence[VideoRecord], captions: Sequence[str]) -> dict:
    corpus = ScoredCorpus.from_text(captions, [r.captions for r in records], [r.video_id for r in records])
    return score_corpus(corpus)


def evaluate(model: CaptionModel, records: Sequence[VideoRecord], vocab: Vocabulary,
             beam: int | None = None, max_len: int | None = None) -> tuple[list[str], dict]:
    """Beam-decode every video and score against all of its references."""
    if not records:
        raise ValidationError("cannot evaluate an empty dataset")
    captions = caption_records(model, records, vocab, beam, max_len)
    return captions, evaluate_captions(records, captions)


def write_captions(path: str | Path, records: Sequence[VideoRecord], captions: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{r.video_id}\t{c}\n" for r, c in zip(records, captions)))


def write_evaluation(paths: RunPaths, records, captions, report) -> None:
    write_captions(paths.captions, records, captions)
    write_report(report, paths.metrics, paths.metrics_per_video)
