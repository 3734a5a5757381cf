"""Physics constants, reward bounds and labeling thresholds for every environment.

Dynamics constants are the canonical gym values. Kept in one place so they
can be audited against the reference implementations.
"""
import math

CARTPOLE = dict(
    gravity=9.8,
    masscart=1.0,
    masspole=0.1,
    length=0.5,  # half the pole length
    force_mag=10.0,
    tau=0.02,
    x_threshold=2.4,
    theta_threshold=12 * 2 * math.pi / 360,
    reset_bound=0.05,
    max_episode_steps=200,
)

MOUNTAINCAR = dict(
    min_position=-1.2,
    max_position=0.6,
    max_speed=0.07,
    goal_position=0.5,
    goal_velocity=0.0,
    force=0.001,
    gravity=0.0025,
    max_episode_steps=200,
)

PENDULUM = dict(
    max_speed=8.0,
    max_torque=2.0,
    dt=0.05,
    g=10.0,
    m=1.0,
    l=1.0,
    max_episode_steps=200,
)

# raw per-step reward ranges, mapped affinely onto [-1/2, 1/2]
REWARD_BOUNDS = {
    "cartpole": (0.0, 1.0),
    "mountaincar": (-1.0, 0.0),
    "pendulum": (-(math.pi**2 + 0.1 * 8.0**2 + 0.001 * 2.0**2), 0.0),
    "lifted_chain": (-0.5, 0.5),
}

# (name, coordinate index, op, threshold); op is "<" or ">="
LABELS = {
    # state (x, x_dot, theta, theta_dot)
    "cartpole": [
        ("safe_cart_position", 0, "<", 1.5),
        ("safe_pole_angle", 2, "<", 0.15),
    ],
    # state (x, v)
    "mountaincar": [
        ("target_position", 0, ">=", 0.5),
        ("right_hand_side", 0, ">=", -0.5),
        ("car_going_forward", 1, ">=", 0.0),
    ],
    # state (cos theta, sin theta, omega)
    "pendulum": [
        ("safe_joint_angle", 0, ">=", math.cos(math.pi / 3)),
        ("cos_nonnegative", 0, ">=", 0.0),
        ("sin_nonnegative", 1, ">=", 0.0),
        ("positive_angular_velocity", 2, ">=", 0.0),
    ],
}
