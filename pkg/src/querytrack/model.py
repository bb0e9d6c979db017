"""Model assembly: builds the full parameter set, separates frozen from
trainable groups, and reads/writes checkpoints.

Frozen groups never move once build_model returns:

    enc/    patch encoder, random initialization
    brain/  token embedding, causal blocks, output head - pretrained on the
            instruction corpus at build time, then frozen

Everything else trains: lora/ adapters, imgproj/, phi/, dec/, prop/.
Checkpoints are zip archives with fixed entry timestamps, one .npy member
per parameter plus a meta.json carrying the config and the lexicon, so the
same parameters always serialize to the same bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .brain import Vocabulary, add_brain_params, build_vocabulary, pretrain_brain
from .core import RunConfig
from .decoder import add_decoder_params
from .encoder import add_encoder_params

FROZEN_PREFIXES = ("enc/", "brain/")

_FORMAT = "querytrack-checkpoint-1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class TrackModel:
    """Parameters plus the config and vocabulary they were built for."""

    params: dict
    config: RunConfig
    vocab: Vocabulary


def build_model(config: RunConfig, *, log=None) -> TrackModel:
    """Fresh model, fully determined by config (including config.seed).

    Includes the build-time language pretraining of the brain base, so the
    returned model already emits the answer template; the base is frozen
    from here on.
    """
    vocab = build_vocabulary()
    params: dict = {}
    rng = np.random.default_rng(config.seed)
    add_encoder_params(params, rng, config)
    add_brain_params(params, rng, config, vocab)
    add_decoder_params(params, rng, config)
    pretrain_brain(params, config, vocab, log=log)
    return TrackModel(params=params, config=config, vocab=vocab)


def is_frozen(name: str) -> bool:
    return name.startswith(FROZEN_PREFIXES)


def trainable_names(params: dict) -> list[str]:
    return sorted(k for k in params if not is_frozen(k))


def frozen_names(params: dict) -> list[str]:
    return sorted(k for k in params if is_frozen(k))


def checksum(params: dict, prefix: str = "") -> str:
    """sha256 over the named subset: name, dtype, shape, raw bytes."""
    h = hashlib.sha256()
    for name in sorted(k for k in params if k.startswith(prefix)):
        data = np.ascontiguousarray(params[name].data)
        h.update(name.encode())
        h.update(str(data.dtype).encode())
        h.update(repr(data.shape).encode())
        h.update(data.tobytes())
    return h.hexdigest()


def save_checkpoint(model: TrackModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": _FORMAT,
        "config": model.config.to_dict(),
        "words": list(model.vocab.words),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=2))
        for name in sorted(model.params):
            buf = io.BytesIO()
            np.save(buf, model.params[name].data)
            info = zipfile.ZipInfo(f"params/{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> TrackModel:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != _FORMAT:
            raise ValueError(f"{path} is not a recognized checkpoint "
                             f"(format {meta.get('format')!r})")
        config = RunConfig(**meta["config"])
        vocab = Vocabulary(words=tuple(meta["words"]))
        params = {}
        for entry in zf.namelist():
            if not entry.startswith("params/"):
                continue
            arr = np.load(io.BytesIO(zf.read(entry)))
            params[entry[len("params/"):-len(".npy")]] = ad.parameter(arr)
    return TrackModel(params=params, config=config, vocab=vocab)
