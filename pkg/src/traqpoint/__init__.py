"""Track-aware keypoint learning in plain numpy.

A small convolutional policy proposes keypoints on a reference frame; the
keypoints are followed through a short synthetic sequence and rewarded for
staying salient and distinctive in every frame they remain visible. The
modules are importable on their own: ``geometry`` and ``scenegen`` build
data, ``diffcore`` and ``nets`` hold the hand-written networks, ``sampling``,
``reward`` and ``training`` run policy optimisation, ``inference`` and
``evaluation`` turn checkpoints into keypoints, matches and track metrics.
"""

__version__ = "0.1.0"
