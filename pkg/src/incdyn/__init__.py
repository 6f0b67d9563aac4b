"""Model-based RL toolkit built around an incremental dynamics model.

Modules:
    mathcore -- MLP forward/backward and Adam, pure functions over dataclasses.
    envs     -- pendulum, cart-pole and linear diagnostic environments.
    replay   -- bounded transition buffers with one-step-backward tuples.
    incmodel -- the incremental dynamics model and its training loop.
    sac      -- soft actor-critic updates (twin critics, squashed Gaussian actor).
    dyna     -- the interleaved train/rollout/update loop and policy evaluation.
    finetune -- error-dynamics LQR design and reference tracking.
    harness  -- experiment configs, multi-seed runs, CSV curves and SVG plots.
"""

__version__ = "0.1.0"
