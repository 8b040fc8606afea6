"""Protocol constants for the DSRC control channel.

Everything below describes the 10 MHz IEEE 802.11p profile at the
mandatory 6 Mb/s OFDM rate. These are defaults only: each value can be
overridden per run through MacParams or the scenario file, and nothing
in the solvers reads this module behind the caller's back.

Durations are seconds, frame sizes are bits. Control-frame sizes are
bit-equivalents at the data rate with PHY overhead folded in, because
the timing model charges every frame as bits / data_rate.
"""

SLOT_TIME = 13e-6           # s, aSlotTime for 10 MHz channels
SIFS_TIME = 32e-6           # s, aSIFSTime for 10 MHz channels
PROPAGATION_DELAY = 1e-6    # s, one-way air-propagation allowance
DATA_RATE = 6e6             # bit/s, mandatory rate on the control channel

AIFS_SLOTS = 6              # best-effort AIFSN
CW_MIN = 16                 # initial contention window w0 (draw in [0, w0-1])
CW_SCALING = 2              # window growth factor per retry
MAX_DOUBLINGS = 6           # retries that still grow the window (M)
EXTRA_RETRIES = 1           # further retries at the capped window (f)
QUEUE_CAPACITY = 64         # packets in system, head of line included (K)

ACK_BITS = 1760
RTS_BITS = 1840
CTS_BITS = 1760

PAYLOAD_BITS = 8000         # 1000-byte application payload

BACKGROUND_RATE = 50.0      # pkt/s of non-routing traffic offered per station
COMM_RANGE_M = 1000.0       # nominal V2I radio range

# EDCA parameter sets for the four-category comparison experiment.
# Contention windows are sizes (draw in [0, w0-1]), not CW register values.
# Priority order for internal-collision resolution: first entry wins.
EDCA_PARAMETER_SETS = {
    "ac_vo": {"aifs_slots": 2, "w0": 4, "m_stages": 1, "f_extra": 1},
    "ac_vi": {"aifs_slots": 3, "w0": 8, "m_stages": 1, "f_extra": 1},
    "ac_be": {"aifs_slots": AIFS_SLOTS, "w0": CW_MIN, "m_stages": MAX_DOUBLINGS,
              "f_extra": EXTRA_RETRIES},
    "ac_bk": {"aifs_slots": 9, "w0": CW_MIN, "m_stages": MAX_DOUBLINGS,
              "f_extra": EXTRA_RETRIES},
}
AC_PRIORITY = ("ac_vo", "ac_vi", "ac_be", "ac_bk")
