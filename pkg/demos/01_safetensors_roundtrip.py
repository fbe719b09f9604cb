"""Write a tensor collection to the safetensors container and read it back.

The writer emits header keys in sorted order and assigns offsets in that
same order, so two stores with the same contents always serialize to the
same bytes, regardless of insertion order.
"""

import pathlib

import numpy as np

from subjectkit.safetensors_io import (
    NamingConfig,
    TensorEntry,
    TensorStore,
    discover_lora_pairs,
    read_store,
    write_store,
)

out_dir = pathlib.Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

rng = np.random.default_rng(0)

# a small store resembling one attention projection with a rank-4 update
store = TensorStore(
    tensors={
        "unet.attn.to_q.weight": TensorEntry.from_array(
            rng.normal(size=(32, 32)).astype(np.float32)),
        "unet.attn.to_q.lora_A": TensorEntry.from_array(
            rng.normal(size=(4, 32)).astype(np.float32) * 0.05),
        "unet.attn.to_q.lora_B": TensorEntry.from_array(
            rng.normal(size=(32, 4)).astype(np.float32) * 0.05),
        "unet.attn.to_q.alpha": TensorEntry.from_array(
            np.array(1.0, dtype=np.float32)),
    },
    metadata={"note": "demo store"},
)

path = out_dir / "demo.safetensors"
write_store(store, path)
print(f"wrote {path} ({path.stat().st_size} bytes)")

loaded = read_store(path)
print(f"read back {len(loaded)} tensors, metadata={loaded.metadata}")
assert loaded == store

# byte reproducibility: write the loaded store again and compare
path2 = out_dir / "demo2.safetensors"
write_store(loaded, path2)
assert path.read_bytes() == path2.read_bytes()
print("re-serialization is byte-identical")

# factor discovery under the default lora_A/lora_B convention
discovery = discover_lora_pairs(loaded, NamingConfig())
for delta in discovery.deltas:
    print(f"delta targeting {delta.base_name!r}: rank {delta.rank}, "
          f"alpha {delta.alpha}, U {delta.U.shape}, V {delta.V.shape}")
print(f"unmatched candidates: {discovery.unmatched}")
