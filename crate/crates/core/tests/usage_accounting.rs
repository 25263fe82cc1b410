use scenereplay::replay::UsageTotals;
use scenereplay::vlm::{account, Phase, PriceTable, UsageRecord};

#[test]
fn worked_example_costs_what_the_price_table_implies() {
    let prices = PriceTable::default();
    // 2324 * 2.5 / 1e6 + 38 * 10 / 1e6
    assert!((prices.cost(2324, 38) - 0.00619).abs() < 1e-12);
    let r = UsageRecord::new(Phase::RoiSelection, 2324, 38, 6.1, &prices);
    assert!((r.cost - 0.00619).abs() < 1e-12);
}

#[test]
fn cost_is_rounded_to_currency_precision() {
    let prices = PriceTable {
        input_per_million: 5.0,
        output_per_million: 15.0,
        decimals: 4,
    };
    // 0.01162 + 0.00057 = 0.01219
    assert!((prices.cost(2324, 38) - 0.0122).abs() < 1e-12);
    assert_eq!(prices.cost(0, 0), 0.0);
}

#[test]
fn account_sums_and_averages_per_phase() {
    let prices = PriceTable::default();
    let records = [
        UsageRecord::new(Phase::StateComparison, 1000, 2, 1.0, &prices),
        UsageRecord::new(Phase::StateComparison, 3000, 4, 3.0, &prices),
        UsageRecord::new(Phase::ActionInference, 2000, 10, 2.5, &prices),
        UsageRecord::zero(Phase::RegionDetection),
    ];
    let report = account(&records);
    let cmp = report.phase(Phase::StateComparison);
    assert_eq!((cmp.calls, cmp.input_tokens, cmp.output_tokens), (2, 4000, 6));
    assert!((cmp.mean_latency() - 2.0).abs() < 1e-12);
    assert!((cmp.mean_input_tokens() - 2000.0).abs() < 1e-12);
    let total = report.total();
    assert_eq!((total.calls, total.input_tokens, total.output_tokens), (4, 6000, 16));
    assert_eq!(report.phase(Phase::RoiSelection).calls, 0);
    let json = report.to_json();
    assert_eq!(json["total"]["input_tokens"], 6000);
    let table = report.to_table();
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.contains("2003 (2000 / 3)"), "{table}");
    assert!(!table.contains("roi_selection"));
}

#[test]
fn step_totals_recompute_cost_from_summed_tokens() {
    let prices = PriceTable::default();
    // each record rounds to 0.000003; the sum of tokens costs 0.000005
    let records = vec![UsageRecord::new(Phase::ActionInference, 1, 0, 0.0, &prices); 2];
    let t = UsageTotals::of(&records, &prices);
    assert_eq!((t.calls, t.input_tokens), (2, 2));
    assert!((t.cost - prices.cost(2, 0)).abs() < 1e-15);
}
