//! Decomposition filter taps of the built-in wavelet families, as tabulated by
//! PyWavelets (`dec_lo` / `dec_hi`).

pub const DB4_LO: [f64; 8] = [
    -0.010597401785069032,
    0.0328830116668852,
    0.030841381835560764,
    -0.18703481171909309,
    -0.027983769416859854,
    0.6308807679298589,
    0.7148465705529157,
    0.2303778133088965,
];

pub const DB4_HI: [f64; 8] = [
    -0.2303778133088965,
    0.7148465705529157,
    -0.6308807679298589,
    -0.027983769416859854,
    0.18703481171909309,
    0.030841381835560764,
    -0.0328830116668852,
    -0.010597401785069032,
];

pub const DB6_LO: [f64; 12] = [
    -0.0010773010853084796,
    0.004777257510945511,
    0.0005538422011614961,
    -0.03158203931748603,
    0.027522865530305727,
    0.09750160558732304,
    -0.12976686756726194,
    -0.22626469396543983,
    0.31525035170919763,
    0.7511339080210954,
    0.49462389039845306,
    0.11154074335010947,
];

pub const DB6_HI: [f64; 12] = [
    -0.11154074335010947,
    0.49462389039845306,
    -0.7511339080210954,
    0.31525035170919763,
    0.22626469396543983,
    -0.12976686756726194,
    -0.09750160558732304,
    0.027522865530305727,
    0.03158203931748603,
    0.0005538422011614961,
    -0.004777257510945511,
    -0.0010773010853084796,
];

pub const SYM4_LO: [f64; 8] = [
    -0.07576571478927333,
    -0.02963552764599851,
    0.49761866763201545,
    0.8037387518059161,
    0.29785779560527736,
    -0.09921954357684722,
    -0.012603967262037833,
    0.0322231006040427,
];

pub const SYM4_HI: [f64; 8] = [
    -0.0322231006040427,
    -0.012603967262037833,
    0.09921954357684722,
    0.29785779560527736,
    -0.8037387518059161,
    0.49761866763201545,
    0.02963552764599851,
    -0.07576571478927333,
];

pub const SYM5_LO: [f64; 10] = [
    0.027333068345077982,
    0.029519490925774643,
    -0.039134249302383094,
    0.1993975339773936,
    0.7234076904024206,
    0.6339789634582119,
    0.01660210576452232,
    -0.17532808990845047,
    -0.021101834024758855,
    0.019538882735286728,
];

pub const SYM5_HI: [f64; 10] = [
    -0.019538882735286728,
    -0.021101834024758855,
    0.17532808990845047,
    0.01660210576452232,
    -0.6339789634582119,
    0.7234076904024206,
    -0.1993975339773936,
    -0.039134249302383094,
    -0.029519490925774643,
    0.027333068345077982,
];

pub const COIF3_LO: [f64; 18] = [
    -3.459977319727278e-05,
    -7.0983302506379e-05,
    0.0004662169598204029,
    0.0011175187708306303,
    -0.0025745176881367972,
    -0.009007976136730624,
    0.015880544863669452,
    0.03455502757329774,
    -0.08230192710629983,
    -0.07179982161915484,
    0.42848347637737,
    0.7937772226260872,
    0.40517690240911824,
    -0.06112339000297255,
    -0.06577191128146936,
    0.023452696142077168,
    0.007782596425672746,
    -0.003793512864380802,
];

pub const COIF3_HI: [f64; 18] = [
    0.003793512864380802,
    0.007782596425672746,
    -0.023452696142077168,
    -0.06577191128146936,
    0.06112339000297255,
    0.40517690240911824,
    -0.7937772226260872,
    0.42848347637737,
    0.07179982161915484,
    -0.08230192710629983,
    -0.03455502757329774,
    0.015880544863669452,
    0.009007976136730624,
    -0.0025745176881367972,
    -0.0011175187708306303,
    0.0004662169598204029,
    7.0983302506379e-05,
    -3.459977319727278e-05,
];

pub const COIF5_LO: [f64; 30] = [
    -9.604010112767894e-08,
    -1.6237995172048338e-07,
    2.0612203985788783e-06,
    3.7007277113394796e-06,
    -2.1270221672515614e-05,
    -4.12198619242655e-05,
    0.00014035632812373243,
    0.0003018579416682448,
    -0.0006375589261258812,
    -0.0016616273039298788,
    0.0024315754425382886,
    0.006761520220620417,
    -0.009159507338676163,
    -0.019758391600965465,
    0.032674799467057355,
    0.041287530472117834,
    -0.10556315130733723,
    -0.06203775157498196,
    0.4379823066591634,
    0.7742936228603274,
    0.42157126673075435,
    -0.052046670253554764,
    -0.09192158806008609,
    0.028169744270532353,
    0.023408322118927783,
    -0.010131584846900276,
    -0.00415931262757864,
    0.0021782943778456947,
    0.0003585777411617577,
    -0.000212081862067494,
];

pub const COIF5_HI: [f64; 30] = [
    0.000212081862067494,
    0.0003585777411617577,
    -0.0021782943778456947,
    -0.00415931262757864,
    0.010131584846900276,
    0.023408322118927783,
    -0.028169744270532353,
    -0.09192158806008609,
    0.052046670253554764,
    0.42157126673075435,
    -0.7742936228603274,
    0.4379823066591634,
    0.06203775157498196,
    -0.10556315130733723,
    -0.041287530472117834,
    0.032674799467057355,
    0.019758391600965465,
    -0.009159507338676163,
    -0.006761520220620417,
    0.0024315754425382886,
    0.0016616273039298788,
    -0.0006375589261258812,
    -0.0003018579416682448,
    0.00014035632812373243,
    4.12198619242655e-05,
    -2.1270221672515614e-05,
    -3.7007277113394796e-06,
    2.0612203985788783e-06,
    1.6237995172048338e-07,
    -9.604010112767894e-08,
];

pub const BIOR44_LO: [f64; 10] = [
    0.0,
    0.03782845550726404,
    -0.023849465019556843,
    -0.11062440441843718,
    0.37740285561283066,
    0.8526986790088938,
    0.37740285561283066,
    -0.11062440441843718,
    -0.023849465019556843,
    0.03782845550726404,
];

pub const BIOR44_HI: [f64; 10] = [
    -0.0,
    -0.06453888262869706,
    0.04068941760916406,
    0.41809227322161724,
    -0.7884856164055829,
    0.41809227322161724,
    0.04068941760916406,
    -0.06453888262869706,
    -0.0,
    0.0,
];

/// Names accepted by [`lookup`].
pub const NAMES: [&str; 7] = ["db4", "db6", "sym4", "sym5", "coif3", "coif5", "bior4.4"];

/// `(lo, hi)` taps for a wavelet name.
pub fn lookup(name: &str) -> Option<(&'static [f64], &'static [f64])> {
    Some(match name {
        "db4" => (&DB4_LO, &DB4_HI),
        "db6" => (&DB6_LO, &DB6_HI),
        "sym4" => (&SYM4_LO, &SYM4_HI),
        "sym5" => (&SYM5_LO, &SYM5_HI),
        "coif3" => (&COIF3_LO, &COIF3_HI),
        "coif5" => (&COIF5_LO, &COIF5_HI),
        "bior4.4" => (&BIOR44_LO, &BIOR44_HI),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_lowpass_has_unit_energy_and_root2_sum() {
        for name in ["db4", "db6", "sym4", "sym5", "coif3", "coif5"] {
            let (lo, hi) = lookup(name).unwrap();
            let e: f64 = lo.iter().map(|v| v * v).sum();
            let s: f64 = lo.iter().sum();
            assert!((e - 1.0).abs() < 1e-10, "{name} energy {e}");
            assert!((s - std::f64::consts::SQRT_2).abs() < 1e-10, "{name} sum {s}");
            assert!(hi.iter().sum::<f64>().abs() < 1e-10, "{name} hi sum");
            // Quadrature mirror: hi[k] = (-1)^(k+1) lo[K-1-k].
            let k0 = lo.len();
            for k in 0..k0 {
                let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
                assert!((hi[k] - sign * lo[k0 - 1 - k]).abs() < 1e-12, "{name} qmf {k}");
            }
        }
    }

    #[test]
    fn biorthogonal_lowpass_sums_to_root2() {
        let (lo, hi) = lookup("bior4.4").unwrap();
        assert!((lo.iter().sum::<f64>() - std::f64::consts::SQRT_2).abs() < 1e-10);
        assert!(hi.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn every_name_resolves() {
        for n in NAMES {
            assert!(lookup(n).is_some());
        }
        assert!(lookup("haar").is_none());
    }
}
