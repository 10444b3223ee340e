"""A2D Lab: asymmetric imitation and reinforcement learning on MDP-POMDP gridworld pairs."""
