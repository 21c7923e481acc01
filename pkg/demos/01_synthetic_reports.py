# coding: utf-8

# # Synthetic reports and decisive tokens
#
# The task generator writes short "reports" from a hidden set of active labels.
# Most tokens are template text. Only the finding phrases and the final EOS
# decide whether a report is right, and this script shows how sparse they are.

# In[1]:

import numpy as np

from steerdistill.lexicon import UNIFORM, PhraseLexicon, WeightProfile, compile_matcher, mark_decisive, weights_from_masks
from steerdistill.distill import supervision_mass
from steerdistill.synthtask import EOS, Task, build_prompt

task = Task()
vocab = task.vocab
splits = task.make_splits()
print({k: len(v) for k, v in splits.items()})


# A single deployment case. The condition prefix is a noisy view of the labels.

# In[2]:

case = splits["distill"][0]
print("labels   ", case.labels)
print("condition", vocab.decode(case.condition))
print("report   ", vocab.decode(case.report))


# The lexicon lists each label's surface phrases. The matcher also accepts the
# capitalised and leading-space spellings of the first word.

# In[3]:

matcher = compile_matcher(PhraseLexicon.for_vocab(vocab))
for m in matcher.find(case.report):
    print(m, vocab.decode(case.report[m.start : m.end]))


# Masks mark the decisive positions; the (8, 5) profile turns them into CE weights.

# In[4]:

masks = mark_decisive(case.report, case.labels, matcher, EOS)
w = weights_from_masks(masks, WeightProfile(8, 5))
for tok, wt in zip(case.report, w):
    print(f"{vocab.words[tok]:>12s} {wt:g}")


# Over the whole distill split the decisive share of supervision jumps once
# the weights are applied.

# In[5]:

all_masks = [mark_decisive(c.report, c.labels, matcher, EOS) for c in splits["distill"]]
for name, prof in (("uniform", UNIFORM), ("(8, 5)", WeightProfile(8, 5))):
    mass = supervision_mass(all_masks, prof)
    share = (mass["path"] + mass["eos"]) / sum(mass.values())
    print(f"{name:8s} {mass}  decisive share {share:.3f}")


# With demonstrations the same answer just sits further to the right.

# In[6]:

lay0 = build_prompt(case)
lay8 = build_prompt(case, splits["pool"][:8])
print(len(lay0.tokens), lay0.answer)
print(len(lay8.tokens), lay8.answer)
print(np.array_equal(lay0.tokens[slice(*lay0.answer)], lay8.tokens[slice(*lay8.answer)]))
