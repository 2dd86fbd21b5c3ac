"""The bottleneck-distillation losses on hand-sized tensors.

Run:  python3 demos/02_distillation_losses.py
"""

import math

import torch

from adamm import (
    Discriminator,
    adversarial_loss,
    bbdm_loss,
    discriminator_bce,
    fuse_encoder_bottleneck,
    gram_triple,
    gsme_loss,
)

torch.manual_seed(0)

# ----------------------------------------------------------------------------
# Style matching: the penultimate encoder feature is max-pooled onto the
# bottleneck grid and concatenated; three channel-Gram matrices are built from
# the (enc-fused, bottleneck, dec-first) features and compared teacher vs
# student with a scaled squared error.
# ----------------------------------------------------------------------------
penult = torch.randn(1, 4, 8, 8, 8)
bottleneck = torch.randn(1, 8, 4, 4, 4)
fused = fuse_encoder_bottleneck(penult, bottleneck)
print("fused feature:", tuple(fused.shape), "(4 pooled + 8 bottleneck channels)")

teacher = gram_triple(fused[0], bottleneck[0], torch.randn(8, 4, 4, 4))
student = gram_triple(fused[0] * 0.9, bottleneck[0] * 1.1, torch.randn(8, 4, 4, 4))
print("gram shapes:", [tuple(m.shape) for m in teacher.matrices()])
print("style loss (theta=1):", float(gsme_loss(teacher, student)))
print("style loss of identical triples:", float(gsme_loss(teacher, teacher)))

# ----------------------------------------------------------------------------
# The critic maps a bottleneck-grid field to one probability. Its training
# objective labels teacher features 1 and student features 0; the student's
# adversarial term is log(1 - D(teacher)) + log(D(student)).
# ----------------------------------------------------------------------------
critic = Discriminator(8)
with torch.no_grad():
    d_teacher = critic(bottleneck + 1.0)
    d_student = critic(bottleneck - 1.0)
print("\ncritic outputs:", float(d_teacher), float(d_student))
print("adversarial term:", float(adversarial_loss(d_teacher, d_student)))
print("critic BCE:", float(discriminator_bce(d_teacher, d_student)))
print("adversarial_loss(1/2, 1/2) =", float(adversarial_loss(torch.tensor(0.5), torch.tensor(0.5))),
      "= 2 ln(1/2) =", 2 * math.log(0.5))

combined = bbdm_loss(adversarial_loss(d_teacher, d_student), gsme_loss(teacher, student),
                     lam=1.0, theta=1.0)
print("combined distillation loss:", float(combined))
