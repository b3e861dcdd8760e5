# %% [markdown]
# # Inside an .acdn stream
#
# A manifest describes every chunk; the chunk records follow in priority
# order (stem, head, transition, then units).  Any prefix that ends on a
# chunk boundary is a runnable model.

# %%
import struct

import numpy as np

from accordion import ArchSpec, DepthConfig, Scheme, build, forward
from accordion import wire

spec = ArchSpec(block_widths=(8, 8, 8), units_per_block=2)
model = build(spec, seed=1)
manifest_bytes, chunks = wire.serialize(model, DepthConfig.full(spec, Scheme.BLOCKCOML))
manifest, _ = wire.ModelManifest.from_bytes(manifest_bytes)

print(manifest_bytes[:4], "version", struct.unpack_from("<H", manifest_bytes, 4)[0])
print(manifest.descriptor())
for e in manifest.chunks:
    print(f"#{e.index:<2d} {str(e.piece):10s} offset {e.offset:5d} length {e.length:4d} "
          f"crc {e.crc:08x}")

# %%
# Assemble growing prefixes and compare with skipping units in memory.
x = np.random.default_rng(0).standard_normal((5, 2)).astype(np.float32)
for k in range(3, len(chunks) + 1):
    part = wire.assemble(manifest_bytes, chunks[:k])
    same = np.array_equal(part.forward(x), forward(model, part.config(), x))
    print(f"{k} chunks -> n = {part.achievable_n}, matches in-memory model: {same}")

# %%
# One flipped bit in a payload is caught by the chunk's CRC-32.
bad = bytearray(chunks[4])
bad[-1] ^= 0x10
try:
    wire.assemble(manifest_bytes, chunks[:4] + [bytes(bad)])
except wire.IntegrityError as exc:
    print("rejected:", exc, "(chunk", exc.chunk_index, ")")
