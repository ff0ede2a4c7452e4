"""
Model patches: tiny tunable adapters in a frozen trunk
======================================================

A patch is a bottleneck branch (down-project, relu, up-project) grafted
into each residual block. Its up-projection starts at zero, so the
patched network computes exactly the pre-trained function until
fine-tuning moves it. Freezing the trunk and tuning only the patches,
the task head, and the marker token keeps the tunable share tiny.
"""

import numpy as np

from peterrec.adapters import FinetuneModel, HeadMode, InsertionMode, count_parameters
from peterrec.backbone import BackboneConfig, SequenceModel

cfg = BackboneConfig(vocab_size=2000, embed_dim=64, dilations=(1, 2, 4, 8) * 2, max_len=20)
backbone = SequenceModel(cfg, seed=0)

model = FinetuneModel(
    cfg,
    num_labels=30,
    head_mode=HeadMode.CAUSAL_END_TCL,
    insertion=InsertionMode.SERIAL_TWO_PER_BLOCK,
    bottleneck=8,
    source=backbone.params,
    seed=1,
)

# identity at initialization: the patched trunk is bit-for-bit the backbone
ids = np.arange(3, 23)[None, :]
same = np.array_equal(model.hidden(ids).data, backbone.hidden(ids).data)
print("patched output equals pre-trained output at init:", same)

# the freeze partition and what it costs
partition = model.peterrec_partition()
report = count_parameters(model.params, partition)
print(f"\ntotal parameters   {report.total:10,d}")
print(f"frozen             {report.frozen:10,d}")
print(f"tunable            {report.tunable:10,d}  ({report.tunable_fraction:.2%})")
print(f"  patches          {report.group('patch.'):10,d}")
print(f"  task head        {report.group('task_head.'):10,d}")
print(f"  marker token     {report.group('tcl.'):10,d}")

# per layer, a patch is a fixed fraction of its conv: (2*k*d) / (kernel*k*k)
k, d, kernel = cfg.embed_dim, 8, cfg.kernel_size
print(f"\nper-layer patch/conv weight ratio: {2 * k * d}/{kernel * k * k}"
      f" = {2 * k * d / (kernel * k * k):.3f}")
