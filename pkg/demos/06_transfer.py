"""Transfer learning at small scale: a multilingual base versus training from scratch.

Runs in under a minute on one CPU core; the acceptance suite runs the same
comparison at full replica scale over five seeds.
"""
from mtlab.corpus import make_pretraining_suite, make_shared_task_replica
from mtlab.model import ModelConfig
from mtlab.training import (TrainConfig, build_intermediate, build_vocab, evaluate,
                            finetune_direct, finetune_from_intermediate, pretrain_base,
                            train_from_scratch, translate)

replica = make_shared_task_replica(0, scale=0.2)
en, low = replica[0], replica[1:]
pt = make_pretraining_suite(0, scale=0.2)[1]
vocab = build_vocab(replica + [pt], 400)
model_cfg = ModelConfig(num_layers=1, d_model=32, d_ff=64)

# stand-in for a public multilingual checkpoint, routed by target-language tags
base = pretrain_base("multilingual", [en, pt], TrainConfig(epochs=3, learning_rate=1e-3),
                     model_cfg, vocab)
source = en.dev[0][0]
print("source:", source)
print("  en:", translate(base, [source], "en")[0])
print("  pt:", translate(base, [source], "pt")[0])

aym = low[1]
stage = TrainConfig(epochs=5, learning_rate=1e-3)
direct = finetune_direct(base, aym, stage)
inter = finetune_from_intermediate(build_intermediate(base, low, stage), aym, stage)
scratch = train_from_scratch(vocab, model_cfg, aym, stage)
for name, model in (("base only", base), ("direct fine-tune", direct),
                    ("intermediate then fine-tune", inter), ("from scratch", scratch)):
    print(f"{name:28s} dev chrF2 {evaluate(model, aym)[0]:6.2f}")
