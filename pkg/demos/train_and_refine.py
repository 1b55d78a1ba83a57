"""
A small end-to-end run
======================

Trains the reduced network for a few epochs on a handful of random cases,
then refines a case with a bright false-positive tube.  Takes a few
minutes on one core; more cases and epochs give much cleaner output.
"""
import sys

from pcrefine.experiments import SYNTH_THETA
from pcrefine.network import reduced_spec
from pcrefine.pipeline import InferenceConfig, TrainConfig, refine_case, train
from pcrefine.synth import SyntheticSpec, generate_corpus, generate_nerve

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 6
corpus = generate_corpus(6, seed=7)
spec = reduced_spec()

cfg = TrainConfig(epochs=epochs, subcloud_size=spec.input_size, theta=SYNTH_THETA, seed=1, spec=spec)
res = train([(v, g) for v, g, _ in corpus], cfg,
            progress=lambda r: print("epoch %d  loss %.3f  acc %.3f" % (r.epoch, r.mean_loss, r.point_accuracy)))

vol, gt = generate_nerve(SyntheticSpec(kind="branching", q=0.5, fp_span=5, fp_q=0.9))
ic = InferenceConfig(subcloud_size=spec.input_size, theta=SYNTH_THETA, repetitions=5)
rep = refine_case(vol, gt, res.model, ic)
for name, r in (("thresholded", rep.input), ("refined", rep)):
    hd = "undefined (empty)" if r.hd_mm is None else "%.1f mm" % r.hd_mm
    print("%-12s dice %.3f  hd %s" % (name, r.dice, hd))
