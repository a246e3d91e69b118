"""Teacher, plain KD and RSKD on the synthetic dataset.

Run: python demos/02_staged_distillation.py [--quick]

Trains a residual teacher, then distills a plain student two ways:
a single response-distillation run, and RSKD (three combination-stage
branches merged into one network). It prints the accuracy of each branch,
of the averaged network, and of the logit ensemble of the branches.

The full setting follows configs/desk.yaml and takes roughly ten minutes on
one CPU core. ``--quick`` shrinks everything to under a minute; its numbers
are only a smoke check.
"""

import argparse
import tempfile
from pathlib import Path

from stagedistill import cascade as C
from stagedistill.config import RunConfig
from stagedistill.data import make_synthetic
from stagedistill.models import build, param_count
from stagedistill.training import evaluate, supervised_loss, train

ROOT = Path(__file__).resolve().parents[1]

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true")
args = parser.parse_args()

overrides = []
if args.quick:
    overrides = ["data.n_train=1200", "data.n_val=400", "schedule.epochs=8", "schedule.decay_epochs=[6]",
                 "teacher_schedule.epochs=10", "teacher_schedule.decay_epochs=[8]",
                 "model.teacher.depth=8", "model.student.depth=8"]
cfg = RunConfig.load(ROOT / "configs" / "desk.yaml", overrides)
d = cfg["data"]
train_set, val_set = make_synthetic(d["n_train"], d["n_val"], seed=d["seed"])

teacher, _ = train(build(cfg.teacher_spec(), cfg["seed"]), supervised_loss, train_set,
                   cfg.schedule(teacher=True))
print(f"teacher  {param_count(teacher):>7} params  top1 {evaluate(teacher, val_set).top1:6.2f}")

student_spec = cfg.student_spec()
dcfg = cfg.distill_config()

scratch, _ = train(build(student_spec, cfg["seed"]), supervised_loss, train_set, dcfg.schedule)
print(f"scratch  {param_count(scratch):>7} params  top1 {evaluate(scratch, val_set).top1:6.2f}")

kd = C.distill_once(teacher, student_spec, C.SubstageKind.RESPONSE, train_set, config=dcfg)
print(f"KD                      top1 {evaluate(kd.weights, val_set).top1:6.2f}")

with tempfile.TemporaryDirectory() as tmp:
    res = C.rskd_train(teacher, student_spec, train_set, dcfg, val_set, tmp)
    for name, branch in res.branches.items():
        print(f"  branch {name:<6}         top1 {evaluate(branch.weights, val_set).top1:6.2f}")
    print(f"RSKD averaged           top1 {evaluate(res.weights, val_set).top1:6.2f}")
    print(f"RSKD logit ensemble     top1 {evaluate(res.ensemble, val_set).top1:6.2f}")
    print(f"adapter parameters used during training: {res.extra_params}")
