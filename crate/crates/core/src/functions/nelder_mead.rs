//! Nelder-Mead as an incremental state machine. Rather than evaluating the
//! objective itself, the machine emits the points its next step needs and
//! advances when their values are delivered — the shape a local run must
//! have inside an asynchronous multistart generator.
//!
//! Standard coefficients: reflection 1, expansion 2, contraction 0.5,
//! shrink 0.5. Points are clamped to the bound box.

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    /// Waiting for the initial vertex evaluations.
    Init,
    AwaitReflect,
    AwaitExpand { xr: Vec<f64>, fr: f64 },
    AwaitContract { fr: f64, outside: bool },
    AwaitShrink,
    Done,
}

#[derive(Debug)]
pub struct NelderMead {
    lb: Vec<f64>,
    ub: Vec<f64>,
    /// Vertices with known values, kept sorted best-first once complete.
    simplex: Vec<(Vec<f64>, f64)>,
    phase: Phase,
    /// Points requested and not yet delivered, in request order.
    pending: Vec<Vec<f64>>,
    tol: f64,
    max_evals: usize,
    pub evals: usize,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn clamp(x: &mut [f64], lb: &[f64], ub: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lb[i], ub[i]);
    }
}

impl NelderMead {
    /// Start a run from an already-evaluated seed point. Returns the machine
    /// and the first evaluation requests (the n perturbed vertices).
    pub fn new(
        seed_x: Vec<f64>,
        seed_f: f64,
        lb: Vec<f64>,
        ub: Vec<f64>,
        tol: f64,
        max_evals: usize,
    ) -> (NelderMead, Vec<Vec<f64>>) {
        let n = seed_x.len();
        let mut requests = Vec::with_capacity(n);
        for i in 0..n {
            let span = (ub[i] - lb[i]).max(f64::MIN_POSITIVE);
            let step = 0.05 * span;
            let mut v = seed_x.clone();
            // Step toward the roomier side so a seed on the bound still
            // produces a distinct vertex.
            if v[i] + step <= ub[i] {
                v[i] += step;
            } else {
                v[i] -= step;
            }
            clamp(&mut v, &lb, &ub);
            requests.push(v);
        }
        let machine = NelderMead {
            lb,
            ub,
            simplex: vec![(seed_x, seed_f)],
            phase: Phase::Init,
            pending: requests.clone(),
            tol,
            max_evals,
            evals: 1, // the seed came evaluated
        };
        (machine, requests)
    }

    pub fn finished(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn best(&self) -> (&[f64], f64) {
        let (x, f) = &self.simplex[0];
        (x, *f)
    }

    /// Largest vertex distance from the best point.
    pub fn simplex_size(&self) -> f64 {
        let best = &self.simplex[0].0;
        self.simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(best)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    fn order(&mut self) {
        self.simplex
            .sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    }

    fn centroid(&self) -> Vec<f64> {
        let n = self.simplex.len() - 1;
        let dim = self.simplex[0].0.len();
        let mut c = vec![0.0; dim];
        for (x, _) in &self.simplex[..n] {
            for i in 0..dim {
                c[i] += x[i];
            }
        }
        for v in &mut c {
            *v /= n as f64;
        }
        c
    }

    fn request(&mut self, x: Vec<f64>) -> Vec<Vec<f64>> {
        self.pending.push(x.clone());
        vec![x]
    }

    /// Order the simplex, test termination, and either finish or emit the
    /// next reflection request.
    fn next_iteration(&mut self) -> Vec<Vec<f64>> {
        self.order();
        if self.simplex_size() < self.tol || self.evals >= self.max_evals {
            self.phase = Phase::Done;
            return Vec::new();
        }
        let worst = self.simplex.last().unwrap().0.clone();
        let c = self.centroid();
        let mut xr: Vec<f64> = c
            .iter()
            .zip(&worst)
            .map(|(ci, wi)| ci + REFLECT * (ci - wi))
            .collect();
        clamp(&mut xr, &self.lb, &self.ub);
        self.phase = Phase::AwaitReflect;
        self.request(xr)
    }

    fn replace_worst(&mut self, x: Vec<f64>, f: f64) {
        let last = self.simplex.len() - 1;
        self.simplex[last] = (x, f);
    }

    /// Feed one evaluated point back. Returns the next requests (empty while
    /// the machine still waits on other pending points or has finished).
    pub fn deliver(&mut self, x: &[f64], f: f64) -> Vec<Vec<f64>> {
        let Some(pos) = self.pending.iter().position(|p| p.as_slice() == x) else {
            return Vec::new(); // not ours; ignore
        };
        self.pending.remove(pos);
        self.evals += 1;

        match self.phase.clone() {
            Phase::Init => {
                self.simplex.push((x.to_vec(), f));
                if !self.pending.is_empty() {
                    return Vec::new();
                }
                self.next_iteration()
            }
            Phase::AwaitReflect => {
                let fr = f;
                let xr = x.to_vec();
                let f_best = self.simplex[0].1;
                let f_second_worst = self.simplex[self.simplex.len() - 2].1;
                let f_worst = self.simplex[self.simplex.len() - 1].1;
                if fr < f_best {
                    let c = self.centroid();
                    let mut xe: Vec<f64> =
                        c.iter().zip(&xr).map(|(ci, ri)| ci + EXPAND * (ri - ci)).collect();
                    clamp(&mut xe, &self.lb, &self.ub);
                    if xe == xr {
                        // Clamped onto the reflection point; nothing to gain.
                        self.replace_worst(xr, fr);
                        return self.next_iteration();
                    }
                    self.phase = Phase::AwaitExpand { xr, fr };
                    self.request(xe)
                } else if fr < f_second_worst {
                    self.replace_worst(xr, fr);
                    self.next_iteration()
                } else {
                    let c = self.centroid();
                    let outside = fr < f_worst;
                    let mut xc: Vec<f64> = if outside {
                        c.iter().zip(&xr).map(|(ci, ri)| ci + CONTRACT * (ri - ci)).collect()
                    } else {
                        let worst = &self.simplex.last().unwrap().0;
                        c.iter().zip(worst).map(|(ci, wi)| ci - CONTRACT * (ci - wi)).collect()
                    };
                    clamp(&mut xc, &self.lb, &self.ub);
                    self.phase = Phase::AwaitContract { fr, outside };
                    self.request(xc)
                }
            }
            Phase::AwaitExpand { xr, fr } => {
                if f < fr {
                    self.replace_worst(x.to_vec(), f);
                } else {
                    self.replace_worst(xr, fr);
                }
                self.next_iteration()
            }
            Phase::AwaitContract { fr, outside } => {
                let accept = if outside { f <= fr } else { f < self.simplex.last().unwrap().1 };
                if accept {
                    self.replace_worst(x.to_vec(), f);
                    self.next_iteration()
                } else {
                    // Shrink everything toward the best vertex.
                    let best = self.simplex[0].0.clone();
                    let mut requests = Vec::new();
                    for (xi, _) in self.simplex[1..].iter() {
                        let mut v: Vec<f64> = best
                            .iter()
                            .zip(xi)
                            .map(|(b, v)| b + SHRINK * (v - b))
                            .collect();
                        clamp(&mut v, &self.lb, &self.ub);
                        requests.push(v);
                    }
                    self.simplex.truncate(1);
                    self.pending.extend(requests.iter().cloned());
                    self.phase = Phase::AwaitShrink;
                    requests
                }
            }
            Phase::AwaitShrink => {
                self.simplex.push((x.to_vec(), f));
                if !self.pending.is_empty() {
                    return Vec::new();
                }
                self.next_iteration()
            }
            Phase::Done => Vec::new(),
        }
    }
}
