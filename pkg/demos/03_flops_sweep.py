# How cost moves with the fraction of visible units at 512x512.
# Run: python demos/03_flops_sweep.py
from emic.flops import count_flops, linear_fit
from emic.geometry import gen_group_mask
from emic.network import StageConfig

cfg = StageConfig()
ratios, totals, lin = [], [], []
for r in (0.2, 0.4, 0.6, 0.8, 1.0):
    rep = count_flops(cfg, gen_group_mask(512, 512, r, 0))
    cats = rep.categories
    ratios.append(rep.visible_ratio)
    totals.append(rep.total)
    lin.append(cats["linear"])
    print("ratio %.2f  total %6.2f GF  linear %6.2f  attention %6.2f  elementwise %5.2f"
          % (rep.visible_ratio, rep.total / 1e9, cats["linear"] / 1e9, cats["attention"] / 1e9,
             cats["elementwise"] / 1e9))

# Linear layers scale exactly with the token count. Attention grows with the
# square of the tokens sharing a window, which bends the total upward.
print("fit on totals: a=%.3g b=%.3g R2=%.4f" % linear_fit(ratios, totals))
print("fit on linear only: a=%.3g b=%.3g R2=%.4f" % linear_fit(ratios, lin))
print("total(0.2)/total(0.8) = %.3f" % (totals[0] / totals[3]))
