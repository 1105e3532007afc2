use chrono::{Duration, NaiveDate};
use fdapanel::ingest::{align_epidemic_time, read_panel, AlignConfig, CityseriesRecord};
use proptest::prelude::*;

fn series(id: &str, start: NaiveDate, deltas: &[(u8, u16, u16)], population: u64) -> Vec<CityseriesRecord> {
    let (mut day, mut cases, mut deaths) = (0i64, 0u64, 0u64);
    deltas
        .iter()
        .map(|&(gap, dc, dd)| {
            day += gap as i64;
            cases += dc as u64;
            deaths += dd as u64;
            CityseriesRecord {
                city_id: id.into(),
                date: start + Duration::days(day),
                cum_cases: cases,
                cum_deaths: deaths,
                population,
            }
        })
        .collect()
}

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 1).unwrap()
}

fn loose() -> AlignConfig {
    AlignConfig {
        case_threshold: 10,
        death_threshold: 1,
        min_days: 3,
    }
}

fn deltas() -> impl Strategy<Value = Vec<(u8, u16, u16)>> {
    prop::collection::vec((1u8..4, 0u16..50, 0u16..5), 5..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn doubling_population_halves_values(d in deltas(), pop in 1_000u64..5_000_000) {
        let a = align_epidemic_time(&series("x", start(), &d, pop), &loose()).unwrap();
        let b = align_epidemic_time(&series("x", start(), &d, 2 * pop), &loose()).unwrap();
        prop_assert_eq!(a.curves.len(), b.curves.len());
        if let (Some(ca), Some(cb)) = (a.curves.first(), b.curves.first()) {
            prop_assert_eq!(&ca.times, &cb.times);
            for (u, v) in ca.values.iter().zip(&cb.values) {
                prop_assert!((u - 2.0 * v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn realigning_from_day_zero_keeps_times(d in deltas(), pop in 1_000u64..5_000_000) {
        let cfg = loose();
        let recs = series("x", start(), &d, pop);
        let first = align_epidemic_time(&recs, &cfg).unwrap();
        prop_assume!(!first.curves.is_empty());
        let d0 = first.day_zero[0];
        let tail: Vec<_> = recs.into_iter().filter(|r| r.date >= d0).collect();
        let again = align_epidemic_time(&tail, &cfg).unwrap();
        prop_assert_eq!(&again.curves[0].times, &first.curves[0].times);
        prop_assert_eq!(again.day_zero[0], d0);
    }

    #[test]
    fn gaps_are_filled_daily(d in deltas()) {
        let a = align_epidemic_time(&series("x", start(), &d, 100_000), &loose()).unwrap();
        if let Some(c) = a.curves.first() {
            for (i, t) in c.times.iter().enumerate() {
                prop_assert_eq!(*t, i as f64);
            }
        }
    }
}

#[test]
fn panel_rows_may_arrive_in_any_order() {
    let text = "city_id,date,cum_cases,cum_deaths,population\n\
                b,2020-03-02,5,0,100\n\
                a,2020-03-01,1,0,100\n\
                b,2020-03-01,3,0,100\n\
                a,2020-03-01,2,0,100\n";
    let panel = read_panel(text.as_bytes(), "mem").unwrap();
    assert_eq!(panel.duplicates, 1);
    let keys: Vec<_> = panel.records.iter().map(|r| (r.city_id.as_str(), r.cum_cases)).collect();
    assert_eq!(keys, [("a", 2), ("b", 3), ("b", 5)]);
}
