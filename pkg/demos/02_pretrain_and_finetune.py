# Manufacture a "pretrained" encoder with masked-token prediction, then
# fine-tune it on a labelled synthetic task.
#
# The task: each class owns a couple of marker words. A sentence of class c
# is mostly c's markers plus filler words and a little uniform noise.

import time

from ftlab import data as D
from ftlab import encoder as E
from ftlab import trainer as TR
from ftlab.checkpoint import save_checkpoint

task = D.SynthTaskSpec(num_classes=2, size=400, marker_prob=0.8, seed=1)
examples = D.generate_synth(task)
print(examples[0])
print(examples[1])
print("class counts:", D.corpus_stats(examples).counts)

# Pretraining corpus: unlabelled text over the same word inventory.

vocab = E.Vocabulary(task.words())
corpus = [e.text for e in D.generate_synth(D.SynthTaskSpec(size=2000, seed=99))]
cfg = E.EncoderConfig(vocab_size=len(vocab))  # L=4, H=32, 4 heads
print(cfg)

t0 = time.perf_counter()
pretrained = TR.pretrain_toy(corpus, vocab, cfg, TR.PretrainConfig(steps=400), seed=0)
print("pretrained in %.1fs" % (time.perf_counter() - t0))

held_out = [e.text for e in D.generate_synth(D.SynthTaskSpec(size=300, seed=7))]
acc = TR.mlm_accuracy(pretrained, held_out)
print("masked-token accuracy %.3f (chance %.3f)" % (acc, 1 / len(vocab)))

save_checkpoint(pretrained, "pretrained.ftlb")

# Fine-tune with the default protocol: 3 epochs, batch 8, 10% warmup,
# stratified 60/20/20 split driven by the seed.

result = TR.finetune(pretrained, examples, TR.TrainConfig(seed=0))
for row in result.history:
    print("epoch %d val accuracy %.3f f-score %.3f" % (row["epoch"], row["accuracy"], row["f_score"]))
print("test:", {k: round(v, 4) for k, v in result.test.items() if k not in ("epoch", "split")})
print("confusion (rows true, cols predicted)\n", result.test_confusion)
