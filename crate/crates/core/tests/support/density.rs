//! Pumping on an explicit four-qubit density matrix.
//!
//! Qubit order (most significant first): accumulator A, accumulator B,
//! fresh A, fresh B. Both pairs are Werner states; the A side and the B
//! side each apply a CNOT from the accumulator to the fresh half, the
//! fresh halves are measured, and the run is kept on equal outcomes.

type M4 = [[f64; 4]; 4];
type M16 = [[f64; 16]; 16];

pub fn werner(f: f64) -> M4 {
    let x = (1.0 - f) / 3.0;
    // F |Phi+><Phi+| + x (I - |Phi+><Phi+|)
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = x;
    }
    let phi = [0usize, 3];
    for &i in &phi {
        for &j in &phi {
            m[i][j] += (f - x) * 0.5;
        }
    }
    m
}

pub fn kron(a: &M4, b: &M4) -> M16 {
    let mut m = [[0.0; 16]; 16];
    for i in 0..16 {
        for j in 0..16 {
            m[i][j] = a[i >> 2][j >> 2] * b[i & 3][j & 3];
        }
    }
    m
}

fn bit(i: usize, q: usize) -> usize {
    (i >> (3 - q)) & 1
}

/// Basis permutation of CNOT(control -> target).
fn cnot(i: usize, control: usize, target: usize) -> usize {
    if bit(i, control) == 1 {
        i ^ (1 << (3 - target))
    } else {
        i
    }
}

/// One round; returns (fidelity of the kept pair, success probability).
pub fn pump(acc: f64, fresh: f64) -> (f64, f64) {
    let rho = kron(&werner(acc), &werner(fresh));
    let perm = |i: usize| cnot(cnot(i, 1, 3), 0, 2);
    let mut out = [[0.0; 16]; 16];
    for i in 0..16 {
        for j in 0..16 {
            out[perm(i)][perm(j)] = rho[i][j];
        }
    }
    // Keep outcomes 00 and 11 on the fresh pair, trace it out.
    let mut kept = [[0.0; 4]; 4];
    for i in 0..16 {
        for j in 0..16 {
            let (mi, mj) = (i & 3, j & 3);
            if mi == mj && (mi == 0 || mi == 3) {
                kept[i >> 2][j >> 2] += out[i][j];
            }
        }
    }
    let p: f64 = (0..4).map(|i| kept[i][i]).sum();
    let fid = 0.5 * (kept[0][0] + kept[0][3] + kept[3][0] + kept[3][3]) / p;
    (fid, p)
}

/// Fidelity and overall success probability after k - 1 rounds.
pub fn oracle(f: f64, k: u32) -> (f64, f64) {
    let (mut fid, mut success) = (f, 1.0);
    for _ in 1..k {
        let (next, p) = pump(fid, f);
        fid = next;
        success *= p;
    }
    (fid, success)
}
