# Run-to-run spread: fine-tune the same configuration under several seeds
# and look at the standard deviation of the test metrics.
#
# Each seed drives four independent streams (split, init, masks, batch
# order). The skewed, noisy task below is where single runs are least
# reliable.

from ftlab import data as D
from ftlab import strategies as S
from ftlab import trainer as TR
from ftlab.checkpoint import load_checkpoint

pretrained = load_checkpoint("pretrained.ftlb")
examples = D.generate_synth(
    D.SynthTaskSpec(size=500, priors=(0.73, 0.27), marker_prob=0.3, noise_rate=0.3, seed=5)
)
seeds = [1, 2, 3, 4, 5]

for label, strat in [
    ("baseline", S.StrategyConfig()),
    ("4group + mixout 0.7 + reinit 2", S.StrategyConfig(llrd="4group", mixout_p=0.7, reinit_n=2)),
]:
    rep = TR.variance_study(pretrained, examples, TR.TrainConfig(strategy=strat), seeds, num_classes=2)
    print(label)
    for k in ("precision", "recall", "accuracy", "f_score"):
        print("   %-9s %6.2f +- %5.2f" % (k, 100 * rep.mean[k], 100 * rep.std[k]))
    print("   per-seed f-score:", [round(r["f_score"], 3) for r in rep.runs])

# The same study from the command line:
#
#   ftlab variance --pretrained pretrained.ftlb --synth --synth-size 500 \
#       --synth-priors 0.73,0.27 --synth-marker-prob 0.3 --synth-noise 0.3 \
#       --synth-seed 5 --seeds 1,2,3,4,5 --out runs/variance
