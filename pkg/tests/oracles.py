"""Reference values computed independently with mpmath at 40 digits.

Each constant was produced by evaluating the closed forms directly (no code
from the package) and frozen here.
"""

SIGMA_100 = 0.141421356237309504880168872420969807857
OVERLAP_EXACT_100_01 = 0.7788413432882874665377190259177956437573
OVERLAP_APPROX_100_01 = 0.7788007830714048682451702669783206472968
HELSTROM_07788 = 0.2648404796739030597322600727624846785868
ATTACKER_100_01 = 0.1863643274883393559944713469518024686278
ATTACKER_100_2M11 = 0.4982736702298599716507086600466837595858
LEAK_018640 = 0.7578657929930300330403247645423848517181
LEAK_ATTACKER_100_01 = 0.7579066422372420010755982049002973767372
DELTA_H_100_2M11 = 0.5007685322290656064021909124302700346118
LENGTH_100_2M11 = 1301.181605898058123259310554094432704797
RATIO_LEFT_100 = 11.10720734539591561753970247515173424654
RATIO_RIGHT_100_2M11 = 289.6309375740098659945858507181461664911
ML_100_01 = 0.3618368049158815335074658661175921439673
ML_100_01_R2 = 0.3085375387259868963622953893916622601164
LEGIT_ERROR_100 = 5.786107561381937946740804852997805407307e-29

# (n_mean, delta_phi) -> (classical ML error, Helstrom error from the exact overlap)
GRID = {
    (10.0, 0.3): (0.3686578386082090831486625744952840022881, 0.275752876940395572290648191915343962658),
    (100.0, 0.1): (0.361836804915881526152140285734144952573, 0.2648624568939954693743244078324502963092),
    (100.0, 0.05): (0.4298418975993330874493277641668786374525, 0.3769310363454456941788215624181150174045),
    (1000.0, 0.02): (0.4115316368790607362451962669718827507359, 0.3457584459888824341221138202775096972692),
    (30.0, 0.2): (0.3492676791516693541934056108998735505535, 0.245541450649682345970657954235226102077),
    (300.0, 0.05): (0.379731432689966786631691084792178346755, 0.2932617681938991861100795555033347797305),
}
