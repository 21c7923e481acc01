# coding: utf-8

# # Forward cost of in-context demonstrations
#
# Prompt cost is modelled as k_lin * n + k_quad * n^2. Only the ratio of the two
# coefficients matters for relative cost, and it can be fitted from a handful
# of (token count, measured ratio) pairs.

# In[1]:

from steerdistill.evalkit import CostModel, fit_cost_ratio, flops_ratio

tokens = [413, 724, 1036, 1665, 2913]
ratios = [1.00, 1.77, 2.56, 4.22, 7.69]
a = fit_cost_ratio(tokens, ratios)
print(f"k_lin / k_quad = {a:.4g}")


# In[2]:

model = CostModel(k_lin=a, k_quad=1.0)
for n, r in zip(tokens, ratios):
    print(f"{n:5d} tokens  observed {r:.2f}x  proxy {flops_ratio(n, 413, model):.3f}x")


# Adapters add nothing to the prompt, so the query-only student costs exactly
# what the zero-shot prompt costs.

# In[3]:

print(flops_ratio(413, 413, model))
