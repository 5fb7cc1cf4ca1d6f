"""edl: decoupled knowledge-distillation training over elastic workers.

Subpackages by role:

- ``edl.nnkit``        small feed-forward nets, tempered softmax, KD loss
- ``edl.protocol``     length-prefixed JSON wire format and message vocabulary
- ``edl.coordinator``  service registry with TTL-expiring teacher liveness
- ``edl.teacher_node`` inference worker serving soft labels
- ``edl.student_node`` training worker: buffer, scheduler, fail-over, checkpoints
- ``edl.allreduce``    ring all-reduce collective over the student peer group
- ``edl.harness``      experiment runner (real processes or virtual clock)
- ``edl.cli``          the ``edl`` entry point
"""

__version__ = "0.1.0"
