"""Miniature end-to-end pipeline: teacher, few-step causal student with
Self-Rollout distillation, and a burst of policy optimization — small
budgets so the whole story runs in a couple of minutes. The production
configuration lives in the CLI (see README).

Run:  python demos/03_training_pipeline.py
"""
import numpy as np

from flowsteer import distill, grpo, rewards
from flowsteer.evaluate import bench_latency, evaluate_checkpoint
from flowsteer.flows import normalize_schedule
from flowsteer.nets import NetConfig, init_velocity_net
from flowsteer.scenes import build_dataset
from flowsteer.teacher import train_teacher

side, m_steps = 12, 9
net_cfg = NetConfig(side=side, width=32, hidden=64)
schedule = normalize_schedule([1000, 755, 522, 0])
dataset = build_dataset(60, m_steps, seed=7, side=side)
reward_cfg = rewards.RewardConfig()


def scoreboard(kind, store, cfg, label):
    rep = evaluate_checkpoint(kind, store, cfg, schedule, dataset.split("val"),
                              reward_cfg, seed=1234)
    print(f"  {label:>22}: tracked RMSE {rep['rmse_cells']:.2f} cells, "
          f"motion reward {rep['mean_motion_reward']:.3f}, "
          f"quality {rep['mean_quality_reward']:.3f}")
    return rep


print("1) bidirectional teacher (joint denoising, many steps)")
teacher_store = init_velocity_net(net_cfg, 7)
train_teacher(teacher_store, net_cfg, dataset, steps=900, batch_size=8,
              lr=3e-4, weight_decay=0.01, seed=7)
scoreboard("teacher", teacher_store, net_cfg, "teacher (32 steps)")

print("2) distill to the 3-step causal student with Self-Rollout")
student, student_cfg, _ = distill.run_distill(
    teacher_store, net_cfg, schedule, dataset, mode="self-rollout",
    objective="dmd", steps=200, batch_size=2, lr=5e-5, weight_decay=0.0,
    teacher_sample_steps=32, seed=7)
scoreboard("student", student, student_cfg, "distilled (3 steps)")

print("3) policy optimization with selective stochasticity")
grpo_cfg = grpo.GrpoConfig(group_size=8, iterations=40, sigma=0.4, lr=3e-5,
                           control_sets=2)
records = grpo.run_grpo(student, student_cfg, schedule, dataset, grpo_cfg,
                        reward_cfg, rewards.terminal_reward, base_seed=7)
first = np.mean([r["mean_motion_reward"] for r in records[:5]])
last = np.mean([r["mean_motion_reward"] for r in records[-5:]])
print(f"  rollout motion reward {first:.3f} -> {last:.3f} over "
      f"{len(records)} iterations")
scoreboard("student", student, student_cfg, "after GRPO")

print("4) the latency story")
stu = bench_latency("student-AR", student, student_cfg, schedule,
                    dataset.clips[0], runs=10, warmup=2)
tea = bench_latency("teacher-bidirectional", teacher_store, net_cfg, schedule,
                    dataset.clips[0], runs=5, warmup=1, teacher_steps=32)
print(f"  first frame: student {stu['first_frame_seconds']*1e3:.1f} ms "
      f"({stu['first_frame_stepper_calls']} stepper calls) vs teacher "
      f"{tea['first_frame_seconds']*1e3:.1f} ms "
      f"({tea['first_frame_stepper_calls']} frame evaluations)")
