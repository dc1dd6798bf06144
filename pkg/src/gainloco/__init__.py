"""gainloco: desk-scale quadruped locomotion trainer with learned per-joint
PD gain adaptation, a four-class terrain classifier and a variational state
estimator, plus the evaluation harness that scores trained controllers."""

__version__ = "0.1.0"
