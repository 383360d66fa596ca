"""Drive the morphflow command the way a user would, in a scratch directory."""
import subprocess
import sys
import tempfile

work = tempfile.mkdtemp()


def morphflow(*args):
    cmd = [sys.executable, "-m", "morphflow", *args, "--threads", "1"]
    print("$ morphflow", " ".join(args))
    done = subprocess.run(cmd, cwd=work, capture_output=True, text=True)
    print(done.stdout.strip() or "(no output)")
    if done.returncode:
        sys.exit(done.stderr)


morphflow("synth", "--shape", "64,64", "--structures", "5", "--pairs", "12",
          "--splits", "train=8,val=2,test=2", "--out", "data")
morphflow("train", "--train-manifest", "data/train.json", "--val-manifest", "data/val.json",
          "--iterations", "100", "--learning-rate", "1e-3", "--checkpoint-interval", "50", "--out", "run")
morphflow("evaluate", "--manifest", "data/test.json", "--checkpoint", "run/best.ckpt")
morphflow("register", "--checkpoint", "run/best.ckpt", "--fixed", "data/atlas.vol",
          "--moving", "data/pair0010_moving.vol", "--out-field", "phi.vol", "--out-warped", "warped.vol")
morphflow("optimize-pair", "--fixed", "data/atlas.vol", "--moving", "data/pair0010_moving.vol",
          "--out-field", "phi_opt.vol", "--iterations", "30")
print("outputs in", work)
