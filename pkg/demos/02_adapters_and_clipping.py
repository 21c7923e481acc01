# coding: utf-8

# # Steering adapters and the norm clip
#
# An adapter adds a residual to a branch output before it joins the residual
# stream. The residual is rescaled so the result is never more than rho times
# the original norm.

# In[1]:

import torch

from steerdistill.backbone import Backbone, BackboneConfig, DecodeConfig, generate
from steerdistill.steering import AdapterSet, adapter_delta, decay_schedule, inject

torch.set_printoptions(precision=4)
h = torch.tensor([3.0, 4.0], dtype=torch.float64)
print(inject(h, torch.tensor([3.0, 4.0], dtype=torch.float64), rho=1.2))  # clipped to norm 6
print(inject(h, torch.tensor([0.1, 0.0], dtype=torch.float64), rho=10.0))  # untouched


# A dynamic adapter reads the state; a static one does not.

# In[2]:

g = torch.Generator().manual_seed(0)
w_down = torch.randn(4, 16, generator=g, dtype=torch.float64)
w_up = torch.randn(16, 4, generator=g, dtype=torch.float64)
states = torch.randn(3, 16, generator=g, dtype=torch.float64)
print(adapter_delta(states, w_down=w_down, w_up=w_up).norm(dim=-1))
print(adapter_delta(states, v=torch.ones(16, dtype=torch.float64)).norm(dim=-1))


# The up-projection starts at zero, so a fresh adapter set leaves the model alone.

# In[3]:

model = Backbone(BackboneConfig(50, d_model=16, n_layers=2, n_heads=2, d_ff=32), "float64").freeze()
fresh = AdapterSet(2, 16, rank=4)
x = torch.arange(10)
print((model(x, adapters=fresh) - model(x)).abs().max())


# While decoding freely, the adapter residual fades by the decay rate per token.

# In[4]:

print([round(decay_schedule(j, 0.9), 3) for j in range(8)])
print(generate(model, [1, 2, 3], DecodeConfig(max_new_tokens=8, eos_id=0), fresh).tokens)
