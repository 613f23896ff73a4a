# Fine-tune a small base model on the synthetic corruption task with SFT and with TWA.
# Uses the "tiny" preset so it finishes in seconds; the default preset is the
# one behind the ladder numbers in the README.
import numpy as np

from twa.annotations import Dataset
from twa.experiment import PRESETS, make_task, pretrain_base, run_ladder, token_probabilities

preset = PRESETS["tiny"]
task = make_task(preset, seed=0)
ex = task.train.examples[0]
print("source:", ex.source_text, "output:", ex.output_text, "spans:", ex.spans)
print("clean target:", task.clean[ex.source_id])

base = pretrain_base(preset, task, seed=0)
res = run_ladder(preset, 0, ["sft", "off_trajectory", "twa_nl"], task, base)
print("base oracle score: %.3f" % res.base_scores.mean())
for name, scores in res.scores.items():
    print(f"{name:>15}: {scores.mean():.3f}  (checkpoint step {res.runs[name].selected.step})")

# did TWA push probability away from the annotated spans?
errored = Dataset([e for e in task.train.submissions() if e.has_error])
span_b, pos_b = token_probabilities(base, errored, task.vocab)
span_t, pos_t = token_probabilities(res.runs["off_trajectory"].model, errored, task.vocab)
print(f"p(error span): {span_b.mean():.3f} -> {span_t.mean():.3f}")
print(f"p(weight-1 token): {pos_b.mean():.3f} -> {pos_t.mean():.3f}")
print("relative change on good tokens: %+.1f%%" % (100 * (pos_t.mean() / pos_b.mean() - 1)))
print("ranked:", np.argsort([-s.mean() for s in res.scores.values()]))
