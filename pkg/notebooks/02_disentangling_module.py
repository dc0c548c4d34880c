# coding: utf-8

# # Splitting features into domain-unique and domain-invariant parts
#
# The module takes a source-style and a target-style feature map of the same image.
# A fused map drives two channel gates that sum to one per channel (the unique part)
# and a channel-to-channel relation mask between the two maps (the invariant part).

# In[1]:

import torch

from stdaseg.ddm import DomainDisentangledModule, ddm_forward

torch.manual_seed(0)
module = DomainDisentangledModule(channels=16, reduction=4)
f_s = torch.randn(2, 16, 12, 12)
f_t = f_s + 0.3 * torch.randn_like(f_s)


# In[2]:

with torch.no_grad():
    parts = ddm_forward(f_s, f_t, module, return_parts=True)
for name in ("z_st", "v_s", "v_t", "m_st", "u_s", "i_s", "out_s"):
    print(name, tuple(parts[name].shape))


# The two gates are a two-way softmax, so they sum to one exactly.

# In[3]:

print("max |v_s + v_t - 1| =", float((parts["v_s"] + parts["v_t"] - 1).abs().max()))


# Each row of the relation mask is a softmax over channels.

# In[4]:

print("row sums", parts["m_st"].sum(dim=-1).flatten()[:5].numpy())


# The outputs keep the input shape, so the module drops in between backbone and decoder.

# In[5]:

out_s, out_t = ddm_forward(f_s, f_t, module)
print(tuple(out_s.shape) == tuple(f_s.shape), tuple(out_t.shape) == tuple(f_t.shape))
