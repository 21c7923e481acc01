# coding: utf-8

# # The desk benchmark end to end
#
# Runs the same stages as the command line tool: data, pretraining, teacher
# cache, adapter training, query-only decoding and scoring. Set CONFIG to
# configs/tiny.yaml for a run that takes seconds; configs/desk.yaml is the
# full benchmark (about an hour on one core).

# In[1]:

import sys
from pathlib import Path

from steerdistill.pipeline import Run, load_config

root = Path(__file__).resolve().parents[1]
CONFIG = Path(sys.argv[1]) if len(sys.argv) > 1 else root / "configs" / "tiny.yaml"
OUT = Path(sys.argv[2]) if len(sys.argv) > 2 else root / ".bench" / "demo"

cfg = load_config(CONFIG)
run = Run(cfg, OUT)
run.gen_data()
run.pretrain()


# Every stage skips work whose manifest still matches, so rerunning is cheap.

# In[2]:

reports = run.ablate()
print(f"{'config':32s} {'BLEU-4':>7s} {'ROUGE-L':>8s} {'F1':>6s} {'MAE':>6s} {'P%':>6s}")
for r in reports:
    print(f"{r.config:32s} {r.bleu4:7.2f} {r.rouge_l:8.2f} {r.finding_f1:6.2f} {r.length.mae:6.2f} {r.length.proper:6.1f}")


# The EOS profile of the full configuration around the reference boundary.

# In[3]:

full = [r for r in reports if r.extra["id"] == "eos5"][0]
for off, p in zip(full.eos.offsets, full.eos.mean_prob):
    print(f"{off:+3d} {'#' * int(60 * p)} {p:.3f}")
