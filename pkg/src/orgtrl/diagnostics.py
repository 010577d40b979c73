"""Gradient checks of the full model on a small random problem."""

from __future__ import annotations

import numpy as np
import torch

from .caption_decoder import CaptionModel, DecoderConfig, DecoderState, align_objects
from .feature_store import RESERVED, VideoRecord, Vocabulary, caption_examples
from .nn_substrate import LstmState, ParameterStore, grad_check, numeric_gradient
from .org_encoder import OrgConfig, encode_objects, init_org
from .trainer import batch_losses
from .trl_objectives import precompute_soft_targets, train_elm

TOY_WORDS = ("a", "man", "dog", "runs", "ball")
# Adding a constant vector to every psi row shifts each row of A by a
# constant, which the row softmax cancels: this bias never receives gradient.
INERT_PARAMETERS = ("org.b_j",)
TOY_CAPTIONS = (("a man runs",), ("a dog runs a ball",))


def toy_records(seed: int, frames: int = 3, objects: int = 2, width: int = 5) -> list[VideoRecord]:
    rng = np.random.default_rng(seed)
    return [
        VideoRecord(f"toy{i}", rng.standard_normal((frames, width)).astype(np.float32),
                    rng.standard_normal((frames, width)).astype(np.float32),
                    rng.standard_normal((frames, objects, width)).astype(np.float32), caps)
        for i, caps in enumerate(TOY_CAPTIONS)
    ]


def jitter(params: ParameterStore, rng: np.random.Generator, scale: float = 1.0) -> None:
    """Move parameters off the zero-bias initialisation. At init some
    gradients (e.g. U_b, shared by all objects) are nearly cancelled by the
    softmax and drown in finite-difference roundoff."""
    with torch.no_grad():
        for _, p in params.items():
            p.add_(torch.as_tensor(scale * rng.standard_normal(tuple(p.shape)) / np.sqrt(max(p.shape[0], 1))))


def _check(loss_fn, params, eps, sample, seed, results, key):
    checked = [n for n in params if n not in INERT_PARAMETERS]
    results[key] = grad_check(loss_fn, params, eps, sample, seed, names=checked)
    inert = [n for n in INERT_PARAMETERS if n in params]
    if inert:
        params.zero_grad()
        loss_fn(params).backward()
        worst = 0.0
        for n in inert:
            worst = max(worst, float(params[n].grad.abs().max()),
                        float(np.abs(numeric_gradient(loss_fn, params, n, eps)).max()))
        params.zero_grad()
        results[f"{key}.inert_abs_grad"] = worst


def gradient_suite(org_cfg: OrgConfig, dec_cfg: DecoderConfig, seed: int = 0, eps: float = 2e-4,
                   sample: int | None = 20, lam: float = 0.5) -> dict[str, float]:
    """Max relative gradient error for (a) the ORG encoder alone, (b) one
    decode step from a random state, (c) the combined loss on a 2-video batch.
    Everything runs in float64.

    Parameters in INERT_PARAMETERS are excluded from the relative error and
    reported instead as the largest absolute analytic/numeric gradient under
    "<check>.inert_abs_grad".
    """
    records = toy_records(seed)
    L, N = records[0].num_frames, records[0].num_objects
    if org_cfg.top_k is not None and org_cfg.top_k > L * N:
        org_cfg = OrgConfig(org_cfg.mode, L * N, org_cfg.d)
    vocab = Vocabulary(list(RESERVED) + list(TOY_WORDS))
    rng = np.random.default_rng(seed + 1)
    results = {}

    # (a) encoder with a fixed random linear readout
    org_params = ParameterStore(torch.float64)
    init_org(org_params, records[0].objects.shape[2], org_cfg.d, rng)
    jitter(org_params, rng)
    objects = np.stack([r.objects for r in records])
    readout = torch.as_tensor(rng.standard_normal((2, L, N, org_cfg.d)))
    _check(lambda p: (encode_objects(objects, org_cfg, p) * readout).sum(), org_params, eps, sample, seed,
           results, "org_encoder")

    # (b) one decode step
    model = CaptionModel.create(len(vocab), 5, 5, 5, org_cfg, dec_cfg, seed=seed, dtype=torch.float64)
    jitter(model.params, rng)
    h = dec_cfg.hidden
    state0 = DecoderState(LstmState(*torch.as_tensor(0.5 * rng.standard_normal((2, 2, h))).unbind(0)),
                          LstmState(*torch.as_tensor(0.5 * rng.standard_normal((2, 2, h))).unbind(0)))
    prev = torch.tensor([vocab.id("a"), vocab.id("dog")])
    readout_p = torch.as_tensor(rng.standard_normal((2, len(vocab))))
    align = np.stack([align_objects(r.objects) for r in records])

    def step_loss(p):
        m = model.with_params(p)
        ctx = m.encode(np.stack([r.appearance for r in records]), np.stack([r.motion for r in records]),
                       objects, alignment=align)
        P, _ = m.decode_step(ctx, prev, state0)
        return (P * readout_p).sum()

    _check(step_loss, model.params, eps, sample, seed, results, "decode_step")

    # (c) combined loss end to end
    examples = caption_examples(records, vocab)
    elm = train_elm([e.tokens for e in examples], len(vocab), order=2)
    store = precompute_soft_targets(examples, elm, 4, 1.5, len(vocab))
    alignments = list(align)

    def full_loss(p):
        loss, _, _ = batch_losses(model.with_params(p), records, alignments, examples, store, lam, True)
        return loss

    _check(full_loss, model.params, eps, sample, seed, results, "combined_loss")
    return results
