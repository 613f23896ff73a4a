# Paired bootstrap significance and rank clusters.
import numpy as np

from twa.eval_compare import SystemScores, cluster_ranks, pairwise_significance, significance_matrix

rng = np.random.default_rng(0)
difficulty = rng.uniform(0.3, 0.9, size=200)   # shared per-example difficulty
systems = [SystemScores(name, np.clip(difficulty + shift + rng.normal(0, 0.05, 200), 0, 1))
           for name, shift in [("A", 0.05), ("B", 0.045), ("C", 0.0), ("D", -0.1)]]
for s in systems:
    print(s.name, round(s.mean, 4))

print("p(A vs B) =", pairwise_significance(systems[0], systems[1]))
print("p(A vs D) =", pairwise_significance(systems[0], systems[3]))
print(np.round(significance_matrix(systems), 3))

# walk from the best system; a new rank starts when a system is significantly
# different from any member of the current cluster
print(cluster_ranks(systems))

# identical systems share rank 1
same = [SystemScores(n, difficulty) for n in "XYZ"]
print(cluster_ranks(same))
