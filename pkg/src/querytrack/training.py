"""Joint training of the trainable groups: adapters, image projector, query
projection, decoder, and propagation MLP. The frozen encoder and brain base
never move; the optimizer only walks the trainable names.

One example is a (sequence, instruction, text, frame subset) tuple. The
teacher-forced answer gives the text loss; each sampled frame is decoded
(online query propagated between them) for the mask loss; the purport head
regresses onto the IoU of its own current mask prediction, taken as a
constant target. Total = lambda_text * text + lambda_mask * mask +
lambda_po * purport, the mask term itself being bce_weight * BCE +
dice_weight * DICE (all coefficients from the config).

Stages:

    1  explicit instructions, single frame, no propagation
    2  explicit instructions, three increasing frames
    3  explicit and implicit instructions, three increasing frames
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .brain import answer_forward, build_prompt
from .core import AnnotatedSequence, InstructionRecord
from .decoder import decode_tensors, init_online_query, propagate_query
from .encoder import encode
from .metrics import region_similarity
from .model import TrackModel, trainable_names

STAGES = (1, 2, 3)

_STAGE_KINDS = {1: ("explicit",), 2: ("explicit",), 3: ("explicit", "implicit")}
_STAGE_FRAMES = {1: 1, 2: 3, 3: 3}


@dataclass(frozen=True)
class TrainExample:
    """One optimization unit: which sequence, instruction, phrasing, frames."""

    sequence: AnnotatedSequence
    record: InstructionRecord
    text: str
    frame_indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "frame_indices", tuple(self.frame_indices))
        if self.text not in self.record.all_texts:
            raise ValueError("text is not one of the record's phrasings")
        if len(self.frame_indices) not in (1, 3):
            raise ValueError(f"examples use 1 or 3 frames, got {len(self.frame_indices)}")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError(f"frame indices must strictly increase: {self.frame_indices}")
        if self.frame_indices[-1] >= self.sequence.n_frames:
            raise ValueError("frame index outside the sequence")


def text_loss(logits: Tensor, token_ids, prompt_len: int) -> Tensor:
    """Mean cross-entropy over the answer positions of an input-aligned pass."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if not prompt_len < len(ids):
        raise ValueError("no answer positions to score")
    rows = np.arange(prompt_len - 1, len(ids) - 1)
    lp = ad.log_softmax(logits, axis=-1)
    return -(ad.take(lp, (rows, ids[prompt_len:])).mean())


def mask_loss(logits: Tensor, gt: np.ndarray, bce_coef: float, dice_coef: float,
              eps: float = 1.0) -> Tensor:
    """bce_coef * stable BCE + dice_coef * soft DICE on one mask."""
    y = ad.constant(np.asarray(gt, dtype=np.float64))
    bce = (ad.softplus(logits) - logits * y).mean()
    p = ad.sigmoid(logits)
    dice = 1.0 - (2.0 * (p * y).sum() + eps) / (p.sum() + y.sum() + eps)
    return bce * bce_coef + dice * dice_coef


def purport_loss(score: Tensor, target_iou: float) -> Tensor:
    """Squared error of the purport score against a constant IoU target."""
    return (score - ad.constant(np.float64(target_iou))) ** 2


def joint_loss(model: TrackModel, example: TrainExample):
    """Total loss tensor plus the detached per-term values.

    Reasoning runs teacher-forced on the first sampled frame; the decoded
    queries then segment every sampled frame with the online query flowing
    through the propagation MLP between consecutive ones.
    """
    params, config, vocab = model.params, model.config, model.vocab
    seq, record = example.sequence, example.record
    frames = [seq.frames[i] for i in example.frame_indices]
    gts = [seq.gt_masks[record.target_object_id][i].grid
           for i in example.frame_indices]

    prompt, answer = build_prompt(vocab, example.text)
    logits, q_r, q_p = answer_forward(params, config, vocab, prompt, answer,
                                      encode(params, config, frames[0]))
    l_text = text_loss(logits, prompt + answer, len(prompt))

    q_t = init_online_query(params)
    mask_terms, purport_terms = [], []
    for k, (frame, gt) in enumerate(zip(frames, gts)):
        m_logits, score, q_next = decode_tensors(params, config,
                                                 encode(params, config, frame),
                                                 q_r, q_t, q_p)
        mask_terms.append(mask_loss(m_logits, gt, config.bce_weight,
                                    config.dice_weight))
        purport_terms.append(purport_loss(
            score, region_similarity(m_logits.data > 0.0, gt)))
        if k + 1 < len(frames):
            q_t = propagate_query(params, q_next)

    n = float(len(mask_terms))
    l_text = l_text * config.lambda_text
    l_mask = sum(mask_terms[1:], mask_terms[0]) * (config.lambda_mask / n)
    l_purport = sum(purport_terms[1:], purport_terms[0]) * (config.lambda_po / n)
    total = l_text + l_mask + l_purport
    parts = {"text": float(l_text.data), "mask": float(l_mask.data),
             "purport": float(l_purport.data)}
    return total, parts


class AdamW:
    """Decoupled-weight-decay Adam over an explicit name list.

    Parameters whose grad is None are skipped entirely, so a group that a
    stage never touches keeps its values bit-for-bit.
    """

    def __init__(self, params: dict, names, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.names = list(names)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            g = self.params[n].grad
            if g is None:
                continue
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * self.params[n].data
            self.params[n].data = self.params[n].data - self.lr * update


def sample_example(rng, sequences, stage: int) -> TrainExample:
    """One uniformly sampled example consistent with the stage's curriculum."""
    kinds = _STAGE_KINDS[stage]
    n_frames = _STAGE_FRAMES[stage]
    pool = [(seq, rec) for seq in sequences for rec in seq.instructions
            if rec.kind in kinds and seq.n_frames >= n_frames]
    if not pool:
        raise ValueError(f"no stage-{stage} examples in the given sequences")
    seq, rec = pool[int(rng.integers(len(pool)))]
    text = rec.all_texts[int(rng.integers(len(rec.all_texts)))]
    idx = np.sort(rng.choice(seq.n_frames, size=n_frames, replace=False))
    return TrainExample(sequence=seq, record=rec, text=text,
                        frame_indices=tuple(int(i) for i in idx))


@dataclass(frozen=True)
class TrainHistory:
    """Per-step loss curves for one training run."""

    totals: tuple[float, ...]
    texts: tuple[float, ...]
    masks: tuple[float, ...]
    purports: tuple[float, ...]

    @property
    def initial(self) -> float:
        return self.totals[0]

    @property
    def final(self) -> float:
        return self.totals[-1]


def train(model: TrackModel, sequences, *, stage: int, steps: int,
          csv_path=None, log=None) -> TrainHistory:
    """Optimize the trainable groups in place; returns the loss curves.

    Sampling is driven by a fresh rng seeded from (config.seed, stage), so a
    rerun with the same model, data, and arguments reproduces the same curve
    byte for byte. The learning rate follows a cosine decay from
    config.learning_rate to 5% of it across the run, which keeps late steps
    from bouncing the weights around the optimum. A non-finite loss aborts
    with the failing step named.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    sequences = list(sequences)
    config = model.config
    rng = np.random.default_rng([config.seed, stage])
    opt = AdamW(model.params, trainable_names(model.params),
                lr=config.learning_rate,
                betas=(config.adam_beta1, config.adam_beta2),
                eps=config.adam_eps, weight_decay=config.weight_decay)

    totals, texts, masks, purports = [], [], [], []
    rows = []
    for step in range(steps):
        frac = step / max(steps - 1, 1)
        opt.lr = config.learning_rate * (0.05 + 0.475 * (1.0 + np.cos(np.pi * frac)))
        opt.zero_grad()
        batch_totals, batch_parts = [], []
        acc = None
        for _ in range(model.config.batch_size):
            example = sample_example(rng, sequences, stage)
            total, parts = joint_loss(model, example)
            acc = total if acc is None else acc + total
            batch_totals.append(float(total.data))
            batch_parts.append(parts)
        loss = acc * (1.0 / model.config.batch_size)
        value = float(loss.data)
        if not np.isfinite(value):
            raise RuntimeError(f"loss diverged at step {step}")
        loss.backward()
        opt.step()

        mean = lambda key: float(np.mean([p[key] for p in batch_parts]))
        totals.append(value)
        texts.append(mean("text"))
        masks.append(mean("mask"))
        purports.append(mean("purport"))
        rows.append((step, value, texts[-1], masks[-1], purports[-1]))
        if log is not None and (step % 25 == 0 or step == steps - 1):
            log(f"step {step}: total {value:.4f} text {texts[-1]:.4f} "
                f"mask {masks[-1]:.4f} purport {purports[-1]:.4f}")

    if csv_path is not None:
        path = Path(csv_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "total", "text", "mask", "purport"])
            for row in rows:
                writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    return TrainHistory(totals=tuple(totals), texts=tuple(texts),
                        masks=tuple(masks), purports=tuple(purports))
