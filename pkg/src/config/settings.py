import os

OUT_DIR = os.getenv('EVC_OUT_DIR', 'runs')
LOG_LEVEL = os.getenv('EVC_LOG_LEVEL', 'INFO').upper()
SEED = int(os.getenv('EVC_SEED', '0'))
RUN_SLOW = os.getenv('EVC_RUN_SLOW', '') == '1'
