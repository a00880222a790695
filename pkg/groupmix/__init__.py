"""
GroupMix - GroupMix attention and the GroupMixFormer backbone on a numpy
autodiff core.
"""
__version__ = "1.0.0"
