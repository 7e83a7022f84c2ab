"""When can the attention product run before the expansion MLP?

The attention stage needs A(x) * MLP_e(x). Multiplying first on the
unexpanded features (A(x) * x, then MLP_e) costs a factor lambda less, and
gives the same answer exactly when the expansion MLP's group structure
respects the head slicing: groups == heads. With a dense expansion the two
orders are genuinely different functions.
"""

from emo import IRMBConfig, equivalence_check

print("groups == heads: the orders coincide to rounding")
for seed in range(5):
    cfg = IRMBConfig(8, 8, 2.0, window=2, heads=4, expand_groups=4)
    rep = equivalence_check(cfg, seed=seed)
    print(f"  seed {seed}: max |pre - post| = {rep.max_abs_diff:.3e}  holds={rep.holds}")

print()
print("groups = 1 != heads: generic weights do not commute")
for seed in range(5):
    cfg = IRMBConfig(8, 8, 2.0, window=2, heads=4, expand_groups=1)
    rep = equivalence_check(cfg, seed=seed)
    print(f"  seed {seed}: max |pre - post| = {rep.max_abs_diff:.3e}  holds={rep.holds}")

print()
print("single head always commutes (one attention matrix, one channel block)")
rep = equivalence_check(IRMBConfig(8, 8, 2.0, window=2, heads=1, expand_groups=1), seed=0)
print(f"  max |pre - post| = {rep.max_abs_diff:.3e}  holds={rep.holds}")

print()
print("padding does not break it: padded keys are masked out of the softmax,")
print("so attention rows still sum to 1 and the bias term commutes")
rep = equivalence_check(IRMBConfig(12, 12, 2.0, window=4, heads=3, expand_groups=3),
                        seed=0, hw=(5, 7))
print(f"  5x7 map, 4x4 windows: max |pre - post| = {rep.max_abs_diff:.3e}  holds={rep.holds}")
