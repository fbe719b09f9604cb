"""Run the full two-stage personalization pipeline against the mock backend.

Stage 1 renders the scene with the class label ("person") on the base
model; the subject is then located, the region blurred with the decay
blend, and stage 2 re-renders from that init with the placeholder token
and the subject's weight file attached.  Everything is recorded in a
manifest that can be re-verified and replayed.
"""

import pathlib

import numpy as np

from subjectkit.backends import MockBackend
from subjectkit.pipeline import PipelineJob, load_manifest, replay_job, run_job
from subjectkit.safetensors_io import TensorEntry, TensorStore, write_store

out_dir = pathlib.Path(__file__).parent / "output" / "pipeline"
out_dir.mkdir(parents=True, exist_ok=True)

# a stand-in subject weight file (a real one comes from adapter training)
rng = np.random.default_rng(3)
lora_path = out_dir / "subject.safetensors"
write_store(TensorStore({
    "unet.attn.to_q.lora_A": TensorEntry.from_array(
        rng.normal(size=(4, 16)).astype(np.float32) * 0.05),
    "unet.attn.to_q.lora_B": TensorEntry.from_array(
        rng.normal(size=(16, 4)).astype(np.float32) * 0.05),
}), lora_path)

job = PipelineJob(
    prompt="A photo of Rahul sitting on a chair",
    subject_name="Rahul",
    class_label="person",
    placeholder_token="immen",
    lora_path=str(lora_path),
    seed=7,
    width=256,
    height=256,
)

backend = MockBackend()
manifest = run_job(job, backend, out_dir / "run")

print(f"stage 1 prompt: {manifest.stage1_prompt}")
print(f"stage 2 prompt: {manifest.stage2_prompt}")
print("backend calls:", [c["endpoint"] for c in manifest.backend_calls])
for name, ref in manifest.artifacts.items():
    print(f"  {name:<10} {ref['path']:<16} sha256={ref['sha256'][:16]}...")
print(f"timings: { {k: round(v, 3) for k, v in manifest.timings.items()} }")

# the manifest can be loaded with integrity checking and replayed
verified = load_manifest(manifest.path, verify=True)
print(f"manifest verified: status={verified.status}")

replayed = replay_job(manifest.path, backend, out_dir / "replay")
print("replay reproduced the final hash:",
      replayed.artifacts["final"]["sha256"] == manifest.artifacts["final"]["sha256"])
