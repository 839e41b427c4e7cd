"""Discriminator stub. Mode `clean` writes the fixture reward; `spawn` adds a subprocess import."""
import os
import sys

workdir, mode = sys.argv[1], sys.argv[2]
d4 = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'd4')
reward = open(os.path.join(d4, 'reward.py')).read()
if mode == 'spawn':
    reward = 'import subprocess\n' + reward
with open(os.path.join(workdir, 'reward.py'), 'w') as fh:
    fh.write(reward)
