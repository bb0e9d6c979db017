"""Frame-by-frame tracking session: reason once on the first frame, decode
every frame, carry the online query forward, and re-run the reasoning pass
when the purport score says the prediction stopped matching the intent.

The rethink threshold is set on the first frame as rethink_factor times its
purport score. From the second frame on, if the previous score fell strictly
below the threshold (and no cooldown is pending), the brain re-reads the
current frame and replaces the referring and purport queries; the online
query survives a rethink unless rethink_reanchor resets it.

Ablations:

    none  full system: propagation and rethinking
    rt    rethinking off, propagation on
    rp    rethinking and propagation both off; the online query stays at
          its learned initial value, reasoning runs once
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import Frame
from .brain import reason
from .decoder import decode, init_online_query, propagate_query
from .encoder import encode
from .model import TrackModel

ABLATIONS = ("none", "rt", "rp")


@dataclass(frozen=True)
class SessionStats:
    """Bookkeeping for one tracked sequence."""

    frames: int
    rethink_frames: tuple[int, ...]
    threshold: float
    purport_scores: tuple[float, ...]
    fallback: bool

    @property
    def rethink_frequency(self) -> float:
        return len(self.rethink_frames) / self.frames


@dataclass(frozen=True)
class TrackResult:
    """Answer text, one boolean mask per frame, and session statistics."""

    text: str
    masks: tuple[np.ndarray, ...]
    stats: SessionStats


class Tracker:
    """Runs tracking sessions for one model; stateless between runs.

    The private callables (_reason, _encode, _decode, _propagate) are seams:
    tests replace them to script purport scores or count reasoning calls.
    """

    def __init__(self, model: TrackModel, ablate: str = "none"):
        if ablate not in ABLATIONS:
            raise ValueError(f"ablate must be one of {ABLATIONS}, got {ablate!r}")
        self.model = model
        self.ablate = ablate
        p, c, v = model.params, model.config, model.vocab
        self._reason = lambda frame, instruction: reason(p, c, v, frame, instruction)
        self._encode = lambda frame: encode(p, c, frame)
        self._decode = lambda fm, q_r, q_t, q_p: decode(p, c, fm, q_r, q_t, q_p)

        def _prop(q):
            with ad.no_grad():
                return propagate_query(p, q).data

        self._propagate = _prop

    def run(self, frames, instruction: str) -> TrackResult:
        frames = tuple(frames)
        if not frames:
            raise ValueError("cannot track an empty frame list")
        for f in frames:
            if not isinstance(f, Frame):
                raise TypeError(f"expected Frame, got {type(f).__name__}")

        config = self.model.config
        rethinking = self.ablate == "none"
        propagating = self.ablate != "rp"

        out = self._reason(frames[0], instruction)
        text, fallback = out.text, out.fallback
        q_r, q_p = out.q_referring, out.q_purport
        q_init = init_online_query(self.model.params).data.copy()
        q_t = q_init.copy()

        masks: list[np.ndarray] = []
        scores: list[float] = []
        rethought: list[int] = []
        threshold = 0.0
        cooldown = 0

        for t, frame in enumerate(frames):
            if t and rethinking:
                if cooldown:
                    cooldown -= 1
                elif scores[-1] < threshold:
                    out = self._reason(frame, instruction)
                    fallback = fallback or out.fallback
                    q_r, q_p = out.q_referring, out.q_purport
                    if config.rethink_reanchor:
                        q_t = q_init.copy()
                    rethought.append(t)
                    cooldown = config.rethink_cooldown
            pred = self._decode(self._encode(frame), q_r, q_t, q_p)
            masks.append(pred.mask)
            scores.append(pred.purport_score)
            if t == 0 and rethinking:
                threshold = config.rethink_factor * pred.purport_score
            if propagating:
                q_t = self._propagate(pred.q_next_raw)

        stats = SessionStats(frames=len(frames), rethink_frames=tuple(rethought),
                             threshold=threshold, purport_scores=tuple(scores),
                             fallback=fallback)
        return TrackResult(text=text, masks=tuple(masks), stats=stats)
