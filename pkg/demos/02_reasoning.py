"""From an instruction to a pair of query vectors.

The reasoning module reads the instruction together with one frame and
emits a short answer in a fixed grammar; the hidden states under the two
special answer tokens become the referring query (what to segment) and the
purport query (how good the mask should be judged). This demo uses a small
untrained model, so the emitted text is noise, but the shapes and the
plumbing are the real thing.
"""

import numpy as np

from querytrack.core import RunConfig
from querytrack.brain import build_prompt, reason
from querytrack.model import build_model
from querytrack.synthgen import generate_benchmark

config = RunConfig(brain_dim=32, brain_blocks=2, brain_heads=2,
                   decoder_dim=16, encoder_blocks=1, encoder_heads=2,
                   max_seq_len=96)
model = build_model(config)
bench = generate_benchmark(1, 1, seed=3, n_frames=2)
frame = bench.train[0].frames[0]

print(f"vocabulary: {model.vocab.size} tokens")
prompt, answer = build_prompt(model.vocab, "the red square")
print(f"prompt ids  ({len(prompt)}): {prompt}")
print(f"answer ids  ({len(answer)}): {answer}")
print(f"prompt text: {model.vocab.detokenize(prompt)!r}")
print(f"answer text: {model.vocab.detokenize(answer)!r}")

out = reason(model.params, model.config, model.vocab, frame, "the red square")
print(f"\ngreedy answer: {out.text!r} (fallback={out.fallback})")
print(f"referring query: shape {out.q_referring.shape}, "
      f"norm {np.linalg.norm(out.q_referring):.3f}")
print(f"purport query:   shape {out.q_purport.shape}, "
      f"norm {np.linalg.norm(out.q_purport):.3f}")

# the queries depend on what the model is looking at, not just the words
other = reason(model.params, model.config, model.vocab,
               bench.train[0].frames[1], "the red square")
drift = np.linalg.norm(out.q_referring - other.q_referring)
print(f"\nsame instruction, next frame: referring query moved {drift:.3f}")
