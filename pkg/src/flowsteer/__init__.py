"""Few-step autoregressive flow-matching video generation with RL-tuned
trajectory control, end to end on synthetic moving-blob scenes: train a
bidirectional teacher, distill it into a 3-step causal KV-cached student
with Self-Rollout, fine-tune the student with group-relative policy
optimization under selective stochasticity, and serve real-time
frame-by-frame steered generation."""

__version__ = "0.1.0"
