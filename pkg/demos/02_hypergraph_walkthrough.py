# Building the query-aware hypergraph for a two-aspect question.
#
# The question is split into atoms, every atom (plus the whole question)
# ranks the pages, and each atom's candidate set is filtered against the
# global one to form a hyperedge.

# %%
from mabdqa.embedding import EmbeddingIndex, PageRecord
from mabdqa.gateway import MockEmbedder
from mabdqa.hypergraph import assemble_hypergraph, build_page_graph, build_subquery_set

pages = {
    "p1": "Annual report cover. Company overview.",
    "p2": "Revenue in 2023 was 12 million dollars.",
    "p3": "The offices employ 340 staff across three sites.",
    "p4": "Revenue outlook and staff hiring plans for 2024.",
    "p5": "Weather in the northern region.",
}
emb = MockEmbedder(32, seed=0)
index = EmbeddingIndex(32)
for n, (pid, text) in enumerate(pages.items(), 1):
    index.add(PageRecord("report", pid, n, emb.embed([text])[0], text=text))

# %% page graph: pooled cosine similarity, thresholded
graph = build_page_graph(index, theta_g=0.3)
print("page graph edges:")
for (a, b), w in sorted(graph.edges.items()):
    print(f"  {a} -- {b}  {w:.3f}")

# %% subqueries: the atoms, then the whole question as the global subquery
question = "What was the revenue in 2023 and how many staff are employed?"
subs = build_subquery_set(question, ["revenue in 2023", "number of staff"], emb)
for s in subs:
    print("subquery:", s.text)

# %% hyperedges keep atom candidates that are absent from the global set
# or rank no worse there than they do for the atom
hg = assemble_hypergraph(index, 0.3, subs, theta_h=3, page_graph=graph)
for row in hg.to_json()["hyperedges"]:
    tag = "global" if row["is_global"] else "atom"
    print(f"{tag:6s} {row['text']!r}: candidates {row['candidates']} -> members {row['members']}")
