"""Hausdorff distance between seen and unseen class embeddings for each
built-in template set, using the stub text encoder."""
from ovcos.backbone import StubBackbone
from ovcos.prompts import BUILTIN_SETS, class_embeddings, hausdorff_distance

seen = ["moth", "frog", "owl", "crab"]
unseen = ["sea horse", "stick insect", "chameleon"]
backbone = StubBackbone()
for name, ts in BUILTIN_SETS.items():
    a = class_embeddings(backbone, ts, seen).embeddings.double().numpy()
    b = class_embeddings(backbone, ts, unseen).embeddings.double().numpy()
    print(f"{name:>8}  {hausdorff_distance(a, b):.4f}")
