# fmt: off
#####################################################################
############## GENERAL SETTINGS. YOU SHOULD EDIT THESE ##############
#####################################################################
## This is the default config.py. You can make edits here, but it is suggested to make a file "user_config.py" in this same
## directory, copy the settings you want to change there, and make edits in user_config. Settings in user_config.py always
## override config.py. A per-run file given with --config overrides both, and command line flags override everything.

## Editing tip: If using "None" for a setting, it must be written as None without any quotes. Capitalization matters

MODEL = "kolmogorov"  # one of kolmogorov, grushin, elliptic_ou, weak_lipschitz, sine_1d, zero
MODEL_PARAMS = {"kolmogorov": {"lambda2": 1.0, "mu1": 1.0}}  # per-model parameters. Unknown names are rejected
MODEL_ORDER = 4  # derivative order carried by the vector fields. Must exceed the bracket depth cap
OUTPUT_DIR = "runs"  # CSV grids and manifest.json are written here
WORKERS = 1  # worker threads. The HYPOKERNEL_WORKERS environment variable wins over this
SEED = 0  # random seed for Halton scrambling, uniform sampling and Monte Carlo paths
T = 0.5  # time horizon of density, kernel and path commands
MODEL_POINTS = {"kolmogorov": [0.0, 1.0], "weak_lipschitz": [0.0, 1.0]}  # default start/freeze points. Other models use the origin

##########################################################################################################################################
##############                                   BRACKET RANK SETTINGS                                                      ##############
##########################################################################################################################################
RANK_MODE = "classical"  # classical brackets with the drift, or reduced (drift only as a seed)
RANK_CAP = 3  # maximum bracket depth
RANK_TOL = 1e-8  # relative singular value tolerance
RANK_SAMPLES = 1000  # sampled points for the weak condition check
RANK_SAMPLER = "halton"  # halton or uniform

##########################################################################################################################################
##############                                   DENSITY SETTINGS                                                           ##############
##########################################################################################################################################
GRID_NODES = 121  # nodes per axis of automatically sized grids
TROTTER_NODES = 241  # nodes per axis of automatic Trotter grids
PARAMETRIX_NODES = 41  # nodes per axis of automatic parametrix grids. The Volterra kernel grows with the square of the node count
PARAMETRIX_ORDER = 2  # number of Volterra correction terms
TIME_PANELS = 6  # graded time panels per half interval
TROTTER_M = 64  # Trotter substeps
FLOW_STEPS = 4  # Runge-Kutta steps per Trotter flow substep
STRANG = False  # symmetric splitting instead of Lie ordering
WALK_I = 1  # first field of the square walk, 0 is the drift
WALK_J = 0  # second field of the square walk
WALK_DELTAS = [0.1, 0.03, 0.01, 0.003]  # square walk edge lengths
WALK_STEPS = 16  # Runge-Kutta steps per walk leg

##########################################################################################################################################
##############                                   MONTE CARLO SETTINGS                                                       ##############
##########################################################################################################################################
MC_STEPS = 200  # Euler-Maruyama steps
MC_PATHS = 100000  # Euler-Maruyama paths

##########################################################################################################################################
##############                                   ESTIMATE SETTINGS                                                          ##############
##########################################################################################################################################
MOLLIFICATION_LADDER = [2, 4, 8]  # mollifier radii are 1/m
LIMIT_TROTTER_M = 32  # Trotter substeps per rung of the limit check

##########################################################################################################################################
##############                ADVANCED SETTINGS. DO NOT EDIT THESE IF YOU DON'T UNDERSTAND THEIR IMPLICATIONS               ##############
##########################################################################################################################################
LOG_LEVEL = "WARNING"  # Options are: 'DEBUG','INFO','WARNING','ERROR','NONE', default is 'WARNING'
MAX_LOGFILE_SIZE_IN_MB = 10  # Default: 10
# fmt: on
