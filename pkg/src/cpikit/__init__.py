"""Conservative policy iteration toolkit.

Two tiers: an exact tabular tier (`mdp`, `exact`) that runs relaxed
conservative schemes and numerically verifies their error-propagation
bounds, and a replay-based deep tier (`neural`, `rates`, `agents`,
`envs`, `harness`) implementing the conservative variant of DQN with a
distilled policy network and adaptive mixture rates.
"""

__version__ = "0.1.0"
