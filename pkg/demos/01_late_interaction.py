# Late interaction scoring on a toy page.
#
# Each query vector picks its best-matching page vector, and the page score
# is the sum of those maxima. Run with:  python demos/01_late_interaction.py

# %%
import numpy as np

from mabdqa.embedding import export_similarity_map, late_interaction, normalized_li
from mabdqa.gateway import MockEmbedder

emb = MockEmbedder(32, seed=0)

# %% one query, two pages
query = emb.embed(["revenue in 2023"])[0]
page_hit = np.vstack(emb.embed(["Revenue in 2023 was 12 million dollars.", "Table of contents"]))
page_miss = np.vstack(emb.embed(["Weather in the northern region", "Appendix"]))

print("query vectors:", query.shape)
print("LI hit  :", round(late_interaction(query, page_hit), 4))
print("LI miss :", round(late_interaction(query, page_miss), 4))
print("normalized (divided by query length):", round(normalized_li(query, page_hit), 4))

# %% the per-vector heatmap behind the score
for i, s in enumerate(export_similarity_map(query, page_hit)):
    print(f"page vector {i:2d}: best match {s:+.3f}")

# %% scaling the page by a positive constant scales the score by the same amount
rng = np.random.default_rng(1)
q = rng.standard_normal((4, 8)).astype(np.float32)
p = rng.standard_normal((6, 8)).astype(np.float32)
print("LI(q, 2p) / LI(q, p) =", late_interaction(q, 2 * p) / late_interaction(q, p))
