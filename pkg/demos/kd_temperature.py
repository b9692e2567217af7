"""
Softened teacher targets and the distillation loss
==================================================

How the temperature reshapes a teacher's output, and what the student's
loss and gradient look like as the student's logits move toward the
teacher's.  Runs in well under a second.
"""

import numpy as np

from synthkd.autodiff import Array, Tape, backward
from synthkd.distill import hard_label_loss, kd_loss, soften

# a confident teacher: one large logit, a runner-up, the rest small
teacher = np.array([8.0, 3.0, 1.0, 0.5, 0.0])

print("softened teacher distribution")
for tau in (1, 2, 4, 10, 20):
    p = soften(teacher, tau)
    print(f"  tau={tau:>2}: " + " ".join(f"{v:.3f}" for v in p) + f"   (runner-up {p[1] / p[0]:.2f} x top)")

###############################################################################
# Interpolate the student from uniform logits toward the teacher.  The soft
# loss goes to zero only at the teacher's logits (up to a constant shift); the
# hard loss keeps falling as long as the top logit keeps growing.

print("\nstudent = a * teacher")
print("    a    kd(tau=1)  kd(tau=10)  hard(label 0)")
for a in (0.0, 0.25, 0.5, 1.0, 2.0):
    q = a * teacher
    print(f"  {a:4.2f}  {kd_loss(teacher, Array(q), 1.0).item():9.4f}  {kd_loss(teacher, Array(q), 10.0).item():10.4f}"
          f"  {hard_label_loss(Array(q), 0).item():12.4f}")

###############################################################################
# The tau^2 factor keeps the gradient scale comparable across temperatures.

student = Array(np.zeros(5), requires_grad=True)
print("\ngradient norm at uniform student logits")
for tau in (1, 4, 10, 20):
    student.grad = None
    with Tape():
        loss = kd_loss(teacher, student, tau)
    backward(loss)
    print(f"  tau={tau:>2}: |grad| = {np.linalg.norm(student.grad):.4f}")
