"""Quick check of the oabridge extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import oabridge


def tone(n, freq, amp, sr=16000):
    return [amp * math.sin(2 * math.pi * freq * i / sr) for i in range(n)]


def main():
    grid = oabridge.OaGrid(0.1)
    assert len(grid) == 11
    assert grid.descending()[0] == 1.0 and grid.descending()[-1] == 0.0

    x = tone(16000, 440.0, 0.3)
    y = [0.5 * v for v in x]
    z = oabridge.oa_blend(x, y, 0.25)
    assert all(abs(a - (0.25 * b + 0.75 * c)) < 1e-12 for a, b, c in zip(z, x, y))

    feats = oabridge.fbank(x)
    assert len(feats) == 80 and len(feats[0]) == (16000 - 400) // 160 + 1

    assert oabridge.pq_target(3.0, 2.0) == 0.375
    assert abs(oabridge.wer("the cat sat down", "the cat sat town") - 0.25) < 1e-12
    assert oabridge.loss_ri([0.0] * 11, [0.0] * 11) > 0.0
    assert oabridge.histogram([0.55] * 20, 10)[5] == 20

    net = oabridge.BridgingNet(seed=0, tiny=True)
    omega_hat, logits = net.forward(x, y)
    assert 0.0 <= omega_hat <= 1.0 and len(logits) == 11
    w = net.predict_omega(x, y, strategy="ri")
    assert w in grid.descending()

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "net.ckpt")
        net.save(path)
        again = oabridge.BridgingNet.load(path)
        assert again.n_params == net.n_params
        assert again.forward(x, y) == (omega_hat, logits)

        wav = os.path.join(d, "x.wav")
        oabridge.save_wav(wav, x)
        back, sr = oabridge.load_wav(wav)
        assert sr == 16000 and max(abs(a - b) for a, b in zip(back, x)) <= 1 / 32768

    try:
        oabridge.OaGrid(0.3)
    except oabridge.OaBridgeError:
        pass
    else:
        raise AssertionError("k = 0.3 should be rejected")

    print(f"oabridge smoke test passed ({net.n_params} parameters, omega_hat={omega_hat:.4f})")


if __name__ == "__main__":
    main()
