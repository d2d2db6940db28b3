"""Embeddings: deterministic hashing vectors for queries, roles, and steps."""

import numpy as np

from masc import EmbedderSpec, embed_step, embed_text

spec = EmbedderSpec(kind="hashing", dimension=64)

# The hashing embedder is deterministic and dependency-free: lowercase, split
# on non-alphanumerics, signed hashing into buckets, L2 normalize.
a = embed_text(spec, "the cat sat on the mat")
b = embed_text(spec, "the cat sat on the mat today")
c = embed_text(spec, "prime factorization of large integers")
print(f"norms: {np.linalg.norm(a):.3f} {np.linalg.norm(b):.3f} (always <= 1)")
print(f"cosine(related)   = {float(a @ b):+.3f}")
print(f"cosine(unrelated) = {float(a @ c):+.3f}")
print("overlapping token sets stay close; disjoint ones land near zero\n")

# A step embedding is [role ; output], role half first, dimension 2 * d_e.
step = embed_step(spec, "solver", "the answer is 12")
print(f"step embedding dimension: {step.shape[0]} (2 x {spec.dimension})")
assert np.array_equal(step[:64], embed_text(spec, "solver"))
assert np.array_equal(step[64:], embed_text(spec, "the answer is 12"))
print("halves match independent embed_text calls bit-exactly")

# Remote embedders speak POST {endpoint}/embed with {"model", "texts"} and
# return {"vectors": [[...]]}; responses are cached on disk keyed by
# SHA-256(model_name, text). See README for the full contract.
