# %% [markdown]
# # Soft ordering penalties
#
# Instead of changing the head, two regularizers nudge an independent scorer:
#
# - RiskReg is a hinge on log-sigmoid scores. It is zero once the second scan
#   scores at least `m` nats above the first.
# - ConReg is a contrastive loss on penultimate representations. It pulls
#   same-label scan pairs together and pushes different-label pairs apart.
#
# One weight `gamma` scales whichever penalties are active. With `gamma = 0`
# the loss is exactly the Baseline loss.

# %%
import numpy as np

from progrisk import EncoderConfig, forward, init_kaiming
from progrisk.regularizers import RegConfig, RegKind, contrastive_loss, riskreg_loss, total_regularized_loss
from progrisk.riskform import PairLabels, predict_baseline_pair

# %%
for z1, z2 in [(0.0, 0.0), (-5.0, 5.0), (3.0, -3.0)]:
    loss, d1, d2 = riskreg_loss(z1, z2, margin_m=2.0)
    print(f"RiskReg(f1={z1:+.0f}, f2={z2:+.0f}) = {loss:.4f}   gradient ({d1:+.4f}, {d2:+.4f})")

# %%
h1, h2 = np.array([0.0, 0.0]), np.array([0.18, 0.24])
print("ConReg, same label:     ", contrastive_loss(h1, h2, 1)[0])
print("ConReg, different label:", contrastive_loss(h1, h2, 0)[0])

# %% [markdown]
# Total loss for one knee with labels (0, 1) and both logits at zero.

# %%
model = init_kaiming(EncoderConfig(3, (4,), seed=0))
traces = forward(model, [0.1, 0.2, 0.3]), forward(model, [0.3, -0.2, 0.1])
pred = predict_baseline_pair(0.0, 0.0)
for gamma in (0.0, 1.0):
    total = total_regularized_loss(pred, PairLabels(0, 1), traces, RegConfig(RegKind.RISKREG, 2.0, gamma))
    print(f"gamma={gamma}: total RiskReg loss {total.loss:.7f}")
