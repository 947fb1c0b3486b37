//! Trains the decomposition linear forecaster on one synthetic series and
//! prints the moving-average split plus the test error as training runs.

use fedtrend::data::{make_windows, normalize, split, NormStats, SeriesStore};
use fedtrend::models::{decompose, init_params, loss_on_tape, Batch, ModelSpec};
use fedtrend::numcore::{Tape, Tensor};
use fedtrend::rng::Rng;

fn batch_of(ds: &fedtrend::data::WindowDataset) -> Batch {
    let pairs: Vec<(&[f64], &[f64])> = ds
        .pairs
        .iter()
        .map(|p| (p.x.as_slice(), p.y.as_slice()))
        .collect();
    Batch::from_pairs(&pairs).unwrap()
}

fn main() {
    let mut rng = Rng::from_seed(7);
    let series: Vec<f64> = (0..800)
        .map(|t| {
            let t = t as f64;
            1.5 * (0.2 * t).sin() + 0.002 * t + 0.05 * rng.normal()
        })
        .collect();

    // the seasonal/trend split behind the model
    let head = Tensor::new(vec![1, 12], series[..12].to_vec()).unwrap();
    let (trend, seasonal) = decompose(&head, 5).unwrap();
    println!("first 5 points        {:?}", &series[..5]);
    println!("trend (kernel 5)      {:?}", &trend.data()[..5]);
    println!("seasonal remainder    {:?}", &seasonal.data()[..5]);

    let store = SeriesStore::new(vec![fedtrend::data::ClientSeries {
        id: "solo".into(),
        values: series,
        timestamps: None,
    }])
    .unwrap();
    let (train, test) = split(&store, 0.7, 48).unwrap();
    let stats = NormStats::fit(&train);
    let train = normalize(&train, &stats).unwrap();
    let test = normalize(&test, &stats).unwrap();

    let spec = ModelSpec::dlinear(24, 24).unwrap();
    let train_windows = make_windows(&train.clients[0].values, 24, 24, 1).unwrap();
    let test_windows = make_windows(&test.clients[0].values, 24, 24, 1).unwrap();
    println!(
        "{} training windows, {} test windows, {} parameters",
        train_windows.len(),
        test_windows.len(),
        spec.param_count()
    );

    let train_batch = batch_of(&train_windows);
    let test_batch = batch_of(&test_windows);
    let mut params = init_params(&spec, 1);
    for step in 0..=400 {
        if step % 100 == 0 {
            let test_mse = fedtrend::models::loss(&spec, &params, &test_batch).unwrap();
            println!("step {step:4}: test MSE {test_mse:.4}");
        }
        let tape = Tape::new();
        let p = tape.leaf(params.to_tensor());
        let x = tape.constant(train_batch.x.clone());
        let y = tape.constant(train_batch.y.clone());
        let loss = loss_on_tape(&tape, &spec, p, x, y).unwrap();
        let grads = tape.grad(loss, &[p]).unwrap();
        for (w, g) in params.flat_mut().iter_mut().zip(grads[0].data()) {
            *w -= 0.05 * g;
        }
    }
}
