# Build preference pairs from MQM scores and train with DPO.
from twa.experiment import PRESETS, make_task, pretrain_base
from twa.pairs import PairConfig, build_pairs
from twa.trainer import TrainConfig, prepare, sequence_logprobs, train
from twa.annotations import Dataset

preset = PRESETS["tiny"]
task = make_task(preset, seed=1)

for pref, dis in [("reference_only", "best_submission"), ("reference_only", "worst_submission"),
                  ("all_submissions", "all_submissions"), ("reference_and_submissions", "all_submissions")]:
    pairs = build_pairs(task.train, PairConfig(pref, dis))
    print(f"{pref:>26} / {dis:<17} {len(pairs):4d} pairs")

pairs = build_pairs(task.train, PairConfig())
p = pairs[0]
print("preferred:", p.preferred.system_id, repr(p.preferred.output_text),
      "dispreferred:", p.dispreferred.system_id, repr(p.dispreferred.output_text))

base = pretrain_base(preset, task, seed=1)
run = train(base, pairs, TrainConfig(method="dpo", batch_size=8, learning_rate=3e-3, total_steps=20), task.vocab)

win = prepare(Dataset([q.preferred for q in pairs]), task.vocab)
lose = prepare(Dataset([q.dispreferred for q in pairs]), task.vocab)
for name, m in (("base", base), ("dpo", run.final_model)):
    margin = (sequence_logprobs(m, win) - sequence_logprobs(m, lose)).mean()
    print(f"{name}: mean log-prob margin preferred - dispreferred = {margin:.3f}")
print("loss first/last step: %.4f %.4f" % (run.log[0][1], run.log[-1][1]))
