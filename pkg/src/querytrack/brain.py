"""Reasoning brain: a small causal token model that reads one frame plus an
instruction and emits an answer containing two special tokens, <TK> and <PO>.
The hidden states at those positions are projected into decoder space as the
referring query (which object to segment) and the purport query (how well the
prediction matches the intent).

Parameter groups and their training status:

    brain/*    token embedding, causal blocks, output head   frozen
    lora/*     low-rank adapters on the attention projections trainable
    imgproj/*  image-prefix projector (decoder dim -> brain)  trainable
    phi/*      3-layer projection MLP for <TK>/<PO> hiddens   trainable

The base is pretrained once at build time as a language model over the
instruction corpus (every instruction text the generator can produce, laid
into the prompt template around randomized image prefixes), then frozen;
adapters and projections carry all the task learning. Pretraining makes the
fixed acknowledgement essentially free for the text loss, so the adapters
never spend capacity on template prediction - capacity that would otherwise
be taken from the query pathway the mask loss needs. Merging folds adapters
into a copy of the base weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, concat, tanh
from .core import Frame, RunConfig
from .encoder import FeatureMap, encode
from .nn import (
    add_linear,
    add_param,
    add_transformer_block,
    causal_mask,
    linear,
    sinusoid_1d,
    transformer_block,
)
from .synthgen import instruction_inventory, instruction_lexicon

SPECIAL_TOKENS = ("<PAD>", "<BOS>", "<EOS>", "<UNK>", "<IMAGE>", "<TK>", "<PO>")

# unicode angle brackets are accepted as aliases for the ascii literals
_ALIASES = {f"⟨{name[1:-1]}⟩": name for name in SPECIAL_TOKENS}

_PROMPT_WORDS = ("ASSISTANT:", "Can", "I", "Sure,", "USER:", ",", "in",
                 "object.", "video?", "you")

_SPLITTABLE = ",.?!:"

PROMPT_TEMPLATE = "USER: <IMAGE> Can you track the {description} in the video? ASSISTANT:"
ANSWER_TEXT = "Sure, I track the object. <TK>, <PO>"


@dataclass(frozen=True)
class Vocabulary:
    """Closed word lexicon plus the seven special tokens (ids 0..6)."""

    words: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        for w in self.words:
            if not w or any(c.isspace() for c in w):
                raise ValueError(f"lexicon word {w!r} is empty or contains whitespace")
            if w in SPECIAL_TOKENS or w in _ALIASES:
                raise ValueError(f"lexicon word {w!r} collides with a special token")
        if len(set(self.words)) != len(self.words):
            raise ValueError("lexicon contains duplicate words")
        ids = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        base = len(SPECIAL_TOKENS)
        for i, w in enumerate(self.words):
            ids[w] = base + i
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_tokens", SPECIAL_TOKENS + self.words)

    @property
    def size(self) -> int:
        return len(self._tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def image_id(self) -> int:
        return 4

    @property
    def tk_id(self) -> int:
        return 5

    @property
    def po_id(self) -> int:
        return 6

    def _piece_ids(self, piece: str) -> list[int]:
        piece = _ALIASES.get(piece, piece)
        if piece in self._ids:
            return [self._ids[piece]]
        # split one trailing punctuation mark ("<TK>," -> <TK> ",")
        if len(piece) > 1 and piece[-1] in _SPLITTABLE:
            head, tail = _ALIASES.get(piece[:-1], piece[:-1]), piece[-1]
            if head in self._ids and tail in self._ids:
                return [self._ids[head], self._ids[tail]]
        return [self.unk_id]

    def encode(self, text: str) -> list[int]:
        """Whitespace tokenization; out-of-lexicon pieces map to <UNK>."""
        return [i for piece in text.split() for i in self._piece_ids(piece)]

    def decode(self, ids) -> str:
        """All tokens rendered literally, joined with single spaces."""
        return " ".join(self._tokens[i] for i in ids)

    def detokenize(self, ids) -> str:
        """Words only: <PAD>/<BOS>/<EOS>/<TK>/<PO> are stripped."""
        strip = {self.pad_id, self.bos_id, self.eos_id, self.tk_id, self.po_id}
        return " ".join(self._tokens[i] for i in ids if i not in strip)

    def unknown_words(self, text: str) -> tuple[str, ...]:
        """The whitespace pieces of `text` that encode to <UNK>."""
        return tuple(piece for piece in text.split()
                     if self.unk_id in self._piece_ids(piece))


def build_vocabulary(extra_words=()) -> Vocabulary:
    words = sorted(instruction_lexicon() | set(_PROMPT_WORDS) | set(extra_words))
    return Vocabulary(words=tuple(words))


def build_prompt(vocab: Vocabulary, description: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Prompt and answer token ids for one instruction.

    The description drops a leading article before entering the template
    (instruction texts usually start with "the ..."). The answer is the
    fixed acknowledgement ending with <TK> , <PO> and EOS.
    """
    desc = description.strip()
    if desc.lower().startswith("the "):
        desc = desc[4:]
    prompt = (vocab.bos_id, *vocab.encode(PROMPT_TEMPLATE.format(description=desc)))
    answer = (*vocab.encode(ANSWER_TEXT), vocab.eos_id)
    return prompt, answer


# -- parameters --------------------------------------------------------------------


def add_brain_params(params: dict, rng, config: RunConfig, vocab: Vocabulary) -> None:
    d = config.brain_dim
    add_param(params, "brain/embed", rng.normal(0.0, d ** -0.5, (vocab.size, d)))
    for i in range(config.brain_blocks):
        add_transformer_block(params, rng, f"brain/blk{i}", d)
    add_linear(params, rng, "brain/head", d, vocab.size)
    add_linear(params, rng, "imgproj", config.decoder_dim, d)
    for i in range(config.brain_blocks):
        for sub in ("wq", "wk", "wv", "wo"):
            add_param(params, f"lora/blk{i}/attn/{sub}/a",
                      rng.normal(0.0, d ** -0.5, (d, config.lora_rank)))
            add_param(params, f"lora/blk{i}/attn/{sub}/b",
                      np.zeros((config.lora_rank, d)))
    add_linear(params, rng, "phi/l0", d, d)
    add_linear(params, rng, "phi/l1", d, d)
    add_linear(params, rng, "phi/l2", d, config.decoder_dim)


def _adapted_proj(params: dict, config: RunConfig, blk: int):
    scale = config.lora_alpha / config.lora_rank

    def proj(sub, x):
        out = linear(params, f"brain/blk{blk}/attn/{sub}", x)
        key = f"lora/blk{blk}/attn/{sub}/a"
        if key in params:
            delta = ad.matmul(ad.matmul(x, params[key]),
                              params[f"lora/blk{blk}/attn/{sub}/b"])
            out = out + delta * scale
        return out

    return proj


def lora_merge(params: dict, config: RunConfig) -> dict:
    """New parameter dict with adapters folded into the attention weights.

    The input dict is untouched. The merged dict has no lora/ entries, so
    merging it again is an error (the adapters are consumed).
    """
    lora_keys = [k for k in params if k.startswith("lora/")]
    if not lora_keys:
        raise ValueError("no adapters to merge: they were already consumed")
    scale = config.lora_alpha / config.lora_rank
    merged = {}
    for name, p in params.items():
        if name.startswith("lora/"):
            continue
        merged[name] = ad.parameter(p.data.copy())
    for i in range(config.brain_blocks):
        for sub in ("wq", "wk", "wv", "wo"):
            a = params[f"lora/blk{i}/attn/{sub}/a"].data
            b = params[f"lora/blk{i}/attn/{sub}/b"].data
            w = merged[f"brain/blk{i}/attn/{sub}/w"]
            w.data = w.data + scale * (a @ b)
    return merged


# -- forward passes ---------------------------------------------------------------


def _pool_features(fm: FeatureMap, n_cells: int) -> np.ndarray:
    side = int(round(n_cells ** 0.5))
    p = fm.side
    if side * side != n_cells or p % side:
        raise ValueError(
            f"image_token_count {n_cells} needs a feature side divisible by {side}, got {p}"
        )
    f = p // side
    pooled = fm.grid.reshape(side, f, side, f, fm.dim).mean(axis=(1, 3))
    return pooled.reshape(n_cells, fm.dim)


def brain_forward(params: dict, config: RunConfig, vocab: Vocabulary,
                  token_ids, features: FeatureMap,
                  return_hidden: bool = False):
    """Causal forward pass; output is aligned to the input token positions.

    The single <IMAGE> token is replaced by image_token_count pooled and
    projected feature cells. Returned logits (and hidden states) have one
    row per input token; the <IMAGE> row carries the values at the last
    spliced cell, the position that predicts the following token.
    """
    ids = list(token_ids)
    marks = [i for i, t in enumerate(ids) if t == vocab.image_id]
    if len(marks) != 1:
        raise ValueError(f"prompt must contain exactly one <IMAGE> token, got {len(marks)}")
    img_pos = marks[0]
    n_img = config.image_token_count
    total = len(ids) - 1 + n_img
    if total > config.max_seq_len:
        raise ValueError(f"expanded sequence length {total} exceeds max_seq_len "
                         f"{config.max_seq_len}")

    emb = ad.take(params["brain/embed"], np.asarray(ids, dtype=np.int64))
    img = linear(params, "imgproj", ad.constant(_pool_features(features, n_img)))
    pieces = []
    if img_pos:
        pieces.append(ad.take(emb, np.arange(img_pos)))
    pieces.append(img)
    if img_pos + 1 < len(ids):
        pieces.append(ad.take(emb, np.arange(img_pos + 1, len(ids))))
    # content scaled by sqrt(d) so token identity is not drowned out by the
    # O(1) sinusoid components
    x = concat(pieces, axis=0) * (config.brain_dim ** 0.5) \
        + Tensor(sinusoid_1d(total, config.brain_dim))

    mask = causal_mask(total)
    for i in range(config.brain_blocks):
        x = transformer_block(params, f"brain/blk{i}", x, config.brain_heads,
                              mask=mask, proj=_adapted_proj(params, config, i))

    # map input position p to its expanded position
    out_idx = np.array([p if p < img_pos else p + n_img - 1 for p in range(len(ids))])
    hidden = ad.take(x, out_idx)
    logits = linear(params, "brain/head", hidden)
    if return_hidden:
        return logits, hidden
    return logits


def project_token(params: dict, hidden) -> Tensor:
    """3-layer MLP from brain space to decoder space, tanh after the first two."""
    x = as_tensor(hidden)
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, x.shape[0]))
    h = tanh(linear(params, "phi/l0", x))
    h = tanh(linear(params, "phi/l1", h))
    out = linear(params, "phi/l2", h)
    return ad.reshape(out, (out.shape[1],)) if squeeze else out


@dataclass(frozen=True)
class ReasonOutput:
    """Greedy reasoning result for one (frame, instruction) pair.

    When `fallback` is False the emitted sequence contains <TK> and <PO>
    exactly once each and `text` contains no special tokens. `fallback`
    True marks a degenerate emission (missing or repeated special tokens,
    or no EOS within the length cap); queries then come from the first
    occurrence or, if absent, the final position.
    """

    text: str
    q_referring: np.ndarray
    q_purport: np.ndarray
    token_sequence: tuple[int, ...]
    fallback: bool

    def __post_init__(self):
        if not self.fallback:
            for tok in ("<TK>", "<PO>"):
                if tok in self.text:
                    raise ValueError(f"text contains special token {tok}")


def reason(params: dict, config: RunConfig, vocab: Vocabulary,
           frame: Frame, instruction: str) -> ReasonOutput:
    """Greedy decode of the answer, then query extraction at <TK> and <PO>.

    Structural tokens (<PAD>, <BOS>, <IMAGE>) are masked out of the decode
    space: they mark sequence scaffolding, never answer content.
    """
    features = encode(params, config, frame)
    prompt, _ = build_prompt(vocab, instruction)
    ids = list(prompt)
    emitted: list[int] = []
    blocked = [vocab.pad_id, vocab.bos_id, vocab.image_id]
    with ad.no_grad():
        for _ in range(config.max_answer_len):
            logits = brain_forward(params, config, vocab, ids, features)
            row = logits.data[-1].copy()
            row[blocked] = -np.inf
            nxt = int(np.argmax(row))
            emitted.append(nxt)
            ids.append(nxt)
            if nxt == vocab.eos_id:
                break
        _, hidden = brain_forward(params, config, vocab, ids, features,
                                  return_hidden=True)

        fallback = emitted[-1] != vocab.eos_id
        queries = {}
        for tok in (vocab.tk_id, vocab.po_id):
            count = emitted.count(tok)
            if count != 1:
                fallback = True
            pos = len(prompt) + emitted.index(tok) if count else len(ids) - 1
            queries[tok] = project_token(params, hidden[pos]).data
    return ReasonOutput(
        text=vocab.detokenize(emitted),
        q_referring=queries[vocab.tk_id],
        q_purport=queries[vocab.po_id],
        token_sequence=tuple(emitted),
        fallback=fallback,
    )


def _pretrain_feature_maps(params: dict, config: RunConfig) -> list:
    """Encoded frames of a few internally generated scenes, for pretraining.

    The canvas is sized so the feature grid is 8x8 regardless of patch size,
    matching what any pool-compatible runtime canvas produces.
    """
    from .synthgen import generate_benchmark  # runtime import, avoids a cycle

    canvas = config.patch_size * 8
    bench = generate_benchmark(6, 1, seed=config.seed + 7919, n_frames=4,
                               canvas=(canvas, canvas), change_fraction=0.0,
                               min_shapes=2, max_shapes=2)
    return [encode(params, config, frame)
            for seq in bench.train for frame in seq.frames]


def pretrain_brain(params: dict, config: RunConfig, vocab: Vocabulary,
                   log=None) -> None:
    """Next-token pretraining of the base weights on the instruction corpus.

    Each example is a full prompt + answer over one inventory text. The
    image cells carry encoded frames of internally generated scenes under
    random scale jitter, with isotropic noise maps mixed in (one sample in
    four), so template prediction ends up robust both to realistic feature
    structure and to whatever the trainable image projector later feeds
    those positions. Only brain/ parameters move; runs
    config.brain_pretrain_steps steps (0 skips) with the same cosine-decayed
    learning rate shape the trainer uses. Deterministic given the config.
    """
    steps = config.brain_pretrain_steps
    if steps == 0:
        return
    from .training import AdamW  # runtime import; training imports this module

    corpus = instruction_inventory()
    maps = _pretrain_feature_maps(params, config)
    side = maps[0].side
    rng = np.random.default_rng([config.seed, 0x9E3779B9])
    names = [n for n in params if n.startswith("brain/")]
    opt = AdamW(params, names, lr=config.learning_rate)
    for step in range(steps):
        frac = step / max(steps - 1, 1)
        opt.lr = config.learning_rate * (0.05 + 0.475 * (1.0 + np.cos(np.pi * frac)))
        opt.zero_grad()
        acc = None
        for _ in range(config.batch_size):
            desc = corpus[int(rng.integers(len(corpus)))]
            prompt, answer = build_prompt(vocab, desc)
            ids = list(prompt) + list(answer)
            if rng.random() < 0.25:
                grid = rng.normal(0.0, 10.0 ** rng.uniform(-1.0, 1.0),
                                  (side, side, config.decoder_dim))
            else:
                fm = maps[int(rng.integers(len(maps)))]
                grid = fm.grid * (10.0 ** rng.uniform(-0.3, 0.3))
            logits = brain_forward(params, config, vocab, ids,
                                   FeatureMap(grid=grid, frame_index=0))
            lp = ad.log_softmax(logits, axis=-1)
            rows = np.arange(len(ids) - 1)
            ce = -(ad.take(lp, (rows, np.asarray(ids[1:], dtype=np.int64))).mean())
            acc = ce if acc is None else acc + ce
        loss = acc * (1.0 / config.batch_size)
        if not np.isfinite(float(loss.data)):
            raise RuntimeError(f"pretraining loss diverged at step {step}")
        loss.backward()
        opt.step()
        if log is not None and (step % 25 == 0 or step == steps - 1):
            log(f"pretrain step {step}: ce {float(loss.data):.4f}")


def answer_forward(params: dict, config: RunConfig, vocab: Vocabulary,
                   prompt_ids, answer_ids, features: FeatureMap):
    """Teacher-forced pass for training: logits plus projected queries.

    Returns (logits, q_referring, q_purport) as graph tensors; logits are
    input-aligned over prompt+answer. Query positions are read from the
    forced answer, which must contain <TK> and <PO> exactly once each.
    """
    answer_ids = list(answer_ids)
    for tok, name in ((vocab.tk_id, "<TK>"), (vocab.po_id, "<PO>")):
        if answer_ids.count(tok) != 1:
            raise ValueError(f"forced answer must contain {name} exactly once")
    ids = list(prompt_ids) + answer_ids
    logits, hidden = brain_forward(params, config, vocab, ids, features,
                                   return_hidden=True)
    q_r = project_token(params, hidden[len(prompt_ids) + answer_ids.index(vocab.tk_id)])
    q_p = project_token(params, hidden[len(prompt_ids) + answer_ids.index(vocab.po_id)])
    return logits, q_r, q_p
