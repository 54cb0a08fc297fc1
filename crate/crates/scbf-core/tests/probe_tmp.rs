use std::sync::Arc;

use scbf_core::functional::TestFunctional;
use scbf_core::operators::{ModelParams, NoiseSpec};
use scbf_core::spectral::{Lattice, Phase, WaveIndex};
use scbf_core::stopping::{
    dp_oracle, solve_obstacle, DpConfig, ModeGrid, ObstacleProblem, ReducedGenerator,
};

#[test]
fn probe() {
    let lattice: Arc<Lattice<f64>> = Lattice::new(1, std::f64::consts::TAU);
    let p = ModelParams { mu: 0.5, alpha: 0.25, beta: 0.4, r: 3, convection: true };
    let noise = NoiseSpec::power_law(&lattice, 2.0, 0.5, 1);
    let k = WaveIndex::new(1, 0).canonical();
    let j = (0..lattice.basis_len())
        .find(|&j| {
            let b = lattice.basis(j);
            b.k == k && b.phase == Phase::Cos
        })
        .unwrap();
    let grid = ModeGrid::<f64>::line(-4.0, 4.0, 161);
    let gen = ReducedGenerator::build(&lattice, &p, &noise, &[j], grid.clone()).unwrap();

    let f = TestFunctional::Constant(0.25);
    let g = TestFunctional::NormH2;
    let f_vals = gen.tabulate(&f).unwrap();
    let g_vals = gen.tabulate(&g).unwrap();
    let gmax = g_vals.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    println!("g max {:.6}, g mid {:.6}, f[0] {:.6}", gmax, g_vals[80], f_vals[0]);

    let prob = ObstacleProblem { f: &f, g: &g, horizon: 1.0, dt: Some(1.0 / 200.0), phi0: None };
    let sol = solve_obstacle(&gen, &prob).unwrap();
    let phi = sol.final_phi();
    let pmax = phi.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    println!("phi max {:.6}, phi mid {:.6}, phi end {:.6}", pmax, phi[80], phi[160]);
    println!("sol.g_vals max {:.6}", sol.g_vals.iter().fold(0.0f64, |m, &x| m.max(x.abs())));

    let lam = lattice.basis(j).k.eigenvalue(lattice.period());
    let l = lattice.period();
    let mu_mode = noise.mu(j);
    println!("lam {}, L {}, mu_mode {}", lam, l, mu_mode);
    println!("hand drift at -4: {}",
        -(p.mu * lam + p.alpha) * (-4.0) - p.beta * (3.0 / (2.0 * l * l)) * (-4.0f64).powi(3));
    let hand = move |y: [f64; 2], _d: usize| {
        -(p.mu * lam + p.alpha) * y[0] - p.beta * (3.0 / (2.0 * l * l)) * y[0].powi(3)
    };
    let cfg = DpConfig { n_steps: 200, gh_points: 20 };
    let v = dp_oracle(&grid, &hand, [mu_mode, 0.0], &f_vals, &g_vals, 1.0, &cfg).unwrap();
    let vmax = v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    println!("dp max {:.6}, dp mid {:.6}, dp end {:.6}", vmax, v[80], v[160]);

    // pre-flip variant: x[i] = +z (descending), warm starts intact
    fn gh_old(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0f64; n];
        let mut w = vec![0.0f64; n];
        let pim4 = 0.751_125_544_464_942_5_f64;
        let m = (n + 1) / 2;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => {
                    let a = (2 * n + 1) as f64;
                    a.sqrt() - 1.85575 * a.powf(-1.0 / 6.0)
                }
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0f64;
            for _ in 0..200 {
                let mut p1 = pim4;
                let mut p2 = 0.0f64;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * (2.0 / j as f64).sqrt() * p2
                        - (((j - 1) as f64) / j as f64).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() < 1e-15 {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        (x, w)
    }
    for n in [5usize, 20] {
        let (gx, gw) = gh_old(n);
        let sw: f64 = gw.iter().sum();
        println!(
            "old gh{}: sum w {:.12}; nodes {:?}",
            n,
            sw,
            &gx.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }

    for n in [2usize, 5, 20] {
        let (gx, gw) = scbf_core::stopping::gauss_hermite::<f64>(n);
        let sw: f64 = gw.iter().sum();
        println!(
            "gh{}: sum w {:.12} (want {:.12}); nodes {:?}",
            n,
            sw,
            std::f64::consts::PI.sqrt(),
            &gx.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }

    // bisection on steps / quadrature size / drift
    let zero = |_y: [f64; 2], _d: usize| 0.0;
    for (steps, gh, name, dr) in [
        (1, 1, "1 step gh1 zero", true),
        (1, 20, "1 step gh20 zero", true),
        (200, 1, "200 step gh1 zero", true),
        (200, 20, "200 step gh20 zero", true),
        (200, 1, "200 step gh1 hand", false),
        (5, 20, "5 step gh20 hand", false),
        (50, 20, "50 step gh20 hand", false),
    ] {
        let cfgx = DpConfig { n_steps: steps, gh_points: gh };
        let vv = if dr {
            dp_oracle(&grid, &zero, [mu_mode, 0.0], &f_vals, &g_vals, 1.0, &cfgx).unwrap()
        } else {
            dp_oracle(&grid, &hand, [mu_mode, 0.0], &f_vals, &g_vals, 1.0, &cfgx).unwrap()
        };
        println!("{}: end {:.6} q75 {:.6}", name, vv[160], vv[120]);
    }
}
