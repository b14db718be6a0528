use proptest::prelude::*;
use tpa_core::cost::tpa_decode_coeff;
use tpa_core::{
    attention_params, decode_flops, kv_numbers_per_token, specialized_speedup_holds, Mechanism,
    MechanismSpec,
};

/// Whether `got` rounds to the printed figure, given in millions with its
/// printed number of decimals (e.g. `"3.5"`).
fn rounds_to(got: u64, printed: &str) -> bool {
    let decimals = printed.split('.').nth(1).map_or(0, str::len) as i32;
    let unit = 10f64.powi(6 - decimals);
    let digits: f64 = printed.replace('.', "").parse().unwrap();
    (got as f64 / unit).round() == digits
}

struct Dims {
    d: u64,
    h: u64,
    dh: u64,
    g: u64,
    dc: u64,
    dcp: u64,
    dhr: u64,
}

/// (label, params ≈, projection ≈, attention coefficient exact)
type Row = (&'static str, &'static str, &'static str, u64);

fn check(dims: &Dims, rows: &[Row]) {
    let Dims {
        d,
        h,
        dh,
        g,
        dc,
        dcp,
        dhr,
    } = *dims;
    for &(label, params, proj, coeff) in rows {
        let spec = match label {
            "MHA" => MechanismSpec::mha(d, h, dh),
            "GQA" => MechanismSpec::gqa(d, h, dh, g),
            "MLA" => MechanismSpec::mla(d, h, dh, dc, dcp, dhr),
            other => {
                let r: Vec<u64> = other
                    .trim_start_matches("TPA(")
                    .trim_end_matches(')')
                    .split(',')
                    .map(|x| x.parse().unwrap())
                    .collect();
                MechanismSpec::tpa(Mechanism::Tpa, d, h, dh, (r[0], r[1], r[2]))
            }
        };
        let p = attention_params(&spec).unwrap();
        let f = decode_flops(&spec).unwrap();
        assert!(rounds_to(p, params), "{label}: params {p} vs {params}M");
        assert!(
            rounds_to(f.projection, proj),
            "{label}: projection {} vs {proj}M",
            f.projection
        );
        assert_eq!(f.attention_coeff, coeff, "{label}: attention coefficient");
    }
}

#[test]
fn example_one() {
    let dims = Dims {
        d: 2048,
        h: 32,
        dh: 64,
        g: 4,
        dc: 256,
        dcp: 768,
        dhr: 32,
    };
    check(
        &dims,
        &[
            ("MHA", "16.8", "12.6", 4096),
            ("GQA", "9.4", "5.2", 4096),
            ("MLA", "9.8", "19.5", 17408),
            ("TPA(16,1,1)", "7.7", "3.5", 3648),
            ("TPA(16,2,2)", "8.1", "3.9", 7296),
            ("TPA(8,1,1)", "6.2", "2.0", 2880),
            ("TPA(8,2,2)", "6.6", "2.4", 5760),
        ],
    );
    let tpa = MechanismSpec::tpa(Mechanism::Tpa, 2048, 32, 64, (16, 1, 1));
    assert_eq!(attention_params(&tpa).unwrap(), 7_733_248);
    assert_eq!(
        attention_params(&MechanismSpec::mha(2048, 32, 64)).unwrap(),
        16_777_216
    );
    // The bracketed per-rank terms: R_Q D + H R_Q + H and H(1 + E).
    assert_eq!(tpa_decode_coeff(16, 1, 0, 32, 64, 64), 1568);
    assert_eq!(tpa_decode_coeff(8, 1, 0, 32, 64, 64), 800);
    assert_eq!(tpa_decode_coeff(16, 0, 1, 32, 64, 64), 2080);
}

#[test]
fn example_two() {
    let dims = Dims {
        d: 4096,
        h: 32,
        dh: 128,
        g: 4,
        dc: 512,
        dcp: 1536,
        dhr: 64,
    };
    check(
        &dims,
        &[
            ("MHA", "67.1", "50.3", 8192),
            ("GQA", "37.7", "21.0", 8192),
            ("MLA", "39.1", "77.9", 34816),
            ("TPA(16,1,1)", "28.6", "11.8", 6720),
            ("TPA(16,2,2)", "29.9", "13.1", 13440),
            ("TPA(8,1,1)", "23.3", "6.6", 5440),
            ("TPA(8,2,2)", "24.6", "7.9", 10880),
        ],
    );
}

#[test]
fn example_three() {
    let dims = Dims {
        d: 7168,
        h: 64,
        dh: 128,
        g: 8,
        dc: 512,
        dcp: 1536,
        dhr: 64,
    };
    check(
        &dims,
        &[
            ("MHA", "235", "176.2", 16384),
            ("GQA", "132", "73.4", 16384),
            ("MLA", "101", "268.4", 69632),
            ("TPA(16,1,1)", "83.5", "24.8", 11392),
            ("TPA(16,2,2)", "86.2", "27.5", 22784),
            ("TPA(8,1,1)", "72.5", "13.8", 9856),
            ("TPA(8,2,2)", "75.2", "16.5", 19712),
        ],
    );
    assert_eq!(
        kv_numbers_per_token(&MechanismSpec::mla(7168, 64, 128, 512, 1536, 64)).unwrap(),
        576
    );
}

#[test]
fn table_forms_coincide_when_width_matches() {
    // With h·d_h = d_model: MHA = 4 d², GQA = (2 + 2g/h) d².
    for (d, h, g) in [(2048u64, 32u64, 4u64), (4096, 32, 8), (512, 8, 2)] {
        let dh = d / h;
        assert_eq!(
            attention_params(&MechanismSpec::mha(d, h, dh)).unwrap(),
            4 * d * d
        );
        let gqa = attention_params(&MechanismSpec::gqa(d, h, dh, g)).unwrap();
        assert_eq!(gqa * h, (2 * h + 2 * g) * d * d);
    }
}

fn dims() -> impl Strategy<Value = (u64, u64, u64)> {
    (1u64..4096, 1u64..128, 1u64..256)
}

proptest! {
    #[test]
    fn kv_formulas((d, h, dh) in dims(), rq in 1u64..32, rk in 1u64..8, rv in 1u64..8, dc in 1u64..1024, dhr in 1u64..128) {
        prop_assert_eq!(kv_numbers_per_token(&MechanismSpec::mha(d, h, dh)).unwrap(), 2 * h * dh);
        prop_assert_eq!(kv_numbers_per_token(&MechanismSpec::mqa(d, h, dh)).unwrap(), 2 * dh);
        prop_assert_eq!(kv_numbers_per_token(&MechanismSpec::mla(d, h, dh, dc, 8, dhr)).unwrap(), dc + dhr);
        let t = |k| MechanismSpec::tpa(k, d, h, dh, (rq, rk, rv));
        prop_assert_eq!(kv_numbers_per_token(&t(Mechanism::Tpa)).unwrap(), (rk + rv) * (h + dh));
        prop_assert_eq!(kv_numbers_per_token(&t(Mechanism::TpaKvOnly)).unwrap(), (rk + rv) * (h + dh));
        prop_assert_eq!(kv_numbers_per_token(&t(Mechanism::TpaNonCtxA)).unwrap(), (rk + rv) * dh);
        prop_assert_eq!(kv_numbers_per_token(&t(Mechanism::TpaNonCtxB)).unwrap(), (rk + rv) * h);
    }

    #[test]
    fn gqa_collapses((d, h, dh) in dims()) {
        let mha = MechanismSpec::mha(d, h, dh);
        let mqa = MechanismSpec::mqa(d, h, dh);
        let all = MechanismSpec::gqa(d, h, dh, h);
        let one = MechanismSpec::gqa(d, h, dh, 1);
        prop_assert_eq!(kv_numbers_per_token(&all).unwrap(), kv_numbers_per_token(&mha).unwrap());
        prop_assert_eq!(attention_params(&all).unwrap(), attention_params(&mha).unwrap());
        prop_assert_eq!(decode_flops(&all).unwrap(), decode_flops(&mha).unwrap());
        prop_assert_eq!(kv_numbers_per_token(&one).unwrap(), kv_numbers_per_token(&mqa).unwrap());
        prop_assert_eq!(attention_params(&one).unwrap(), attention_params(&mqa).unwrap());
        prop_assert_eq!(decode_flops(&one).unwrap(), decode_flops(&mqa).unwrap());
    }

    #[test]
    fn speed_check_is_exact(h in 1u64..64, d in 1u64..256, e in 1u64..256, rq in 1u64..32, rk in 1u64..8, rv in 1u64..8) {
        let spec = MechanismSpec::tpa(Mechanism::Tpa, 64, h, d, (rq, rk, rv));
        let s = specialized_speedup_holds(&spec, d, e).unwrap();
        prop_assert_eq!(s.lhs, rq * rk * d + h * rq * rk + h * rv * e);
        prop_assert_eq!(s.rhs, 2 * h * d);
        prop_assert_eq!(s.holds, s.lhs < s.rhs);
    }
}

#[test]
fn specs_round_trip_json() {
    let spec = MechanismSpec::mla(7168, 64, 128, 512, 1536, 64);
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<MechanismSpec>(&text).unwrap(), spec);
    let parsed: MechanismSpec = serde_json::from_str(
        r#"{"kind":"TPA","d_model":2048,"h":32,"d_h":64,"r_q":16,"r_k":1,"r_v":1}"#,
    )
    .unwrap();
    assert_eq!(decode_flops(&parsed).unwrap().attention_coeff, 3648);
    assert!(serde_json::from_str::<MechanismSpec>(
        r#"{"kind":"TPA","d_model":1,"h":1,"d_h":1,"bogus":1}"#
    )
    .is_err());
}
