"""The encoder-decoder transformer: size, causality, checkpoints and greedy decoding."""
import tempfile
from pathlib import Path

import numpy as np

from mtlab.model import ModelConfig, Transformer, forward, greedy_decode, init_params, param_count

cfg = ModelConfig()
print("default configuration:", cfg)
print("parameters:", param_count(cfg))

model = init_params(cfg, seed=0)
rng = np.random.default_rng(0)
src = rng.integers(3, cfg.vocab_size, 9)
tgt = rng.integers(3, cfg.vocab_size, 6)
logits = forward(model, src, tgt).data
print("logits shape:", logits.shape)

# changing a later target token leaves earlier positions bit-identical
changed = tgt.copy()
changed[4:] = 7
print("causal:", np.array_equal(forward(model, src, changed).data[:4], logits[:4]))

print("greedy decode of an untrained model:", greedy_decode(model, src, 8))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ckpt"
    model.save(path)
    back = Transformer.load(path)
    print("checkpoint round trip is byte-identical:", back.to_bytes() == model.to_bytes())
