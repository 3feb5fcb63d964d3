"""Train the part detector on a handful of synthetic static cars and
score it on held-out videos.

Two parts and six training videos; the four-part run
lives in the acceptance suite.
"""
import time

import numpy as np

from staog.data import (background_scenario, eval_part_localization, eval_status, mean_rate,
                        static_scenario, synth_generate)
from staog.learning import TrainConfig, init_templates, make_sample, predict_frames, train

PARTS = ["hood", "lh_light"]


def samples(scenarios):
    out = []
    for sc in scenarios:
        fr, ann = synth_generate(sc)
        out.append(make_sample(fr, ann, 3))
    return out


pos = samples([static_scenario(200 + i, parts=PARTS) for i in range(6)])
neg = samples([background_scenario(200)])
test = samples([static_scenario(90000 + i, parts=PARTS) for i in range(6)])

t = time.perf_counter()
g = init_templates(pos, PARTS)
g, rows = train(g, pos, TrainConfig(outer=2, inner=6), neg)
print(f"trained in {time.perf_counter() - t:.1f}s")
for r in rows:
    print("  ", r)

preds = [predict_frames(g, s) for s in test]
anns = [s.annotation for s in test]
loc = eval_part_localization(preds, anns, 0.5, PARTS)
st = eval_status(preds, anns, 0.5, PARTS)
print("\nheld-out part rates at IoU 0.5")
for p in PARTS:
    print(f"  {p:10s} localization {loc[p]:.2f}   status {st[p]:.2f}")
print(f"  mean       localization {mean_rate(loc):.2f}   status {mean_rate(st):.2f}")

# what the model sees: the hood template's first channels
hood = next(t for t in g.terminals if t.part == "hood")
print("\nhood template (status %d) channel 0:" % hood.status)
print(np.round(hood.appearance[..., 0], 2))
