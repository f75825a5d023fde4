//! The builtin command table: data shaping on edge nodes, aggregation and
//! budget checks on the coordinator, and `return` everywhere.

use super::{CommandCtx, CommandRegistry, DppError, HookOut, Payload, Site};
use crate::data::{filter_columns, in_geofence_cond, Geofence, UserDataset};
use crate::fl::{self, DpConfig, ModelParams, TrainConfig};
use crate::policy::{CommandInvocation, Literal, Value};

/// Decouples the noise draw from the shuffle stream when both derive from
/// one per-node seed.
pub(crate) const NOISE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

fn dataset<'a>(cmd: &str, p: &'a Payload) -> Result<&'a UserDataset, DppError> {
    match p {
        Payload::Dataset(d) => Ok(d),
        other => Err(DppError::PayloadKind {
            command: cmd.to_string(),
            expected: "dataset",
            got: other.kind(),
        }),
    }
}

fn model<'a>(cmd: &str, p: &'a Payload) -> Result<&'a ModelParams, DppError> {
    match p {
        Payload::Model(m) => Ok(m),
        other => Err(DppError::PayloadKind {
            command: cmd.to_string(),
            expected: "model",
            got: other.kind(),
        }),
    }
}

fn update<'a>(cmd: &str, p: &'a Payload) -> Result<&'a ModelParams, DppError> {
    match p {
        Payload::Update(u) => Ok(u),
        other => Err(DppError::PayloadKind {
            command: cmd.to_string(),
            expected: "update",
            got: other.kind(),
        }),
    }
}

fn bad_args(cmd: &str, message: impl Into<String>) -> DppError {
    DppError::BadArgs {
        command: cmd.to_string(),
        message: message.into(),
    }
}

fn float_arg(inv: &CommandInvocation, key: &str) -> Result<f64, DppError> {
    match inv.args.get(key) {
        Some(Value::Lit(Literal::Float(x))) => Ok(*x),
        Some(Value::Lit(Literal::Int(i))) => Ok(*i as f64),
        Some(_) => Err(bad_args(&inv.name, format!("`{key}` must be a number"))),
        None => Err(bad_args(&inv.name, format!("missing `{key}`"))),
    }
}

fn opt_float_arg(inv: &CommandInvocation, key: &str) -> Result<Option<f64>, DppError> {
    if inv.args.contains_key(key) {
        float_arg(inv, key).map(Some)
    } else {
        Ok(None)
    }
}

fn opt_int_arg(inv: &CommandInvocation, key: &str) -> Result<Option<i64>, DppError> {
    match inv.args.get(key) {
        Some(Value::Lit(Literal::Int(i))) => Ok(Some(*i)),
        Some(_) => Err(bad_args(&inv.name, format!("`{key}` must be an integer"))),
        None => Ok(None),
    }
}

fn int_arg(inv: &CommandInvocation, key: &str) -> Result<i64, DppError> {
    opt_int_arg(inv, key)?.ok_or_else(|| bad_args(&inv.name, format!("missing `{key}`")))
}

fn str_arg(inv: &CommandInvocation, key: &str) -> Result<String, DppError> {
    match inv.args.get(key) {
        Some(Value::Lit(Literal::Str(s))) => Ok(s.clone()),
        Some(_) => Err(bad_args(&inv.name, format!("`{key}` must be a string"))),
        None => Err(bad_args(&inv.name, format!("missing `{key}`"))),
    }
}

fn string_list_arg(inv: &CommandInvocation, key: &str) -> Result<Vec<String>, DppError> {
    match inv.args.get(key) {
        Some(Value::List(items)) => items
            .iter()
            .map(|l| match l {
                Literal::Str(s) => Ok(s.clone()),
                _ => Err(bad_args(&inv.name, format!("`{key}` must list strings"))),
            })
            .collect(),
        Some(Value::Lit(Literal::Str(s))) => Ok(vec![s.clone()]),
        Some(_) => Err(bad_args(&inv.name, format!("`{key}` must list strings"))),
        None => Err(bad_args(&inv.name, format!("missing `{key}`"))),
    }
}

fn train_config(inv: &CommandInvocation, seed: u64) -> Result<TrainConfig, DppError> {
    let epochs = opt_int_arg(inv, "epochs")?.unwrap_or(1);
    let epochs = u32::try_from(epochs)
        .map_err(|_| bad_args(&inv.name, "`epochs` must be a non-negative integer"))?;
    let local_lr = float_arg(inv, "lr")?;
    // Default is one full batch; any batch size at least the dataset length
    // behaves identically.
    let batch_size = match opt_int_arg(inv, "batch_size")? {
        Some(b) if b >= 1 => b as usize,
        Some(_) => return Err(bad_args(&inv.name, "`batch_size` must be >= 1")),
        None => usize::MAX,
    };
    Ok(TrainConfig {
        epochs,
        local_lr,
        batch_size,
        seed,
    })
}

fn budget_hook(
    ctx: &mut CommandCtx,
    inv: &CommandInvocation,
) -> Result<HookOut, DppError> {
    let group = str_arg(inv, "group")?;
    let max_epsilon = match opt_float_arg(inv, "eps")? {
        Some(e) => e,
        None => float_arg(inv, "max_eps")?,
    };
    let ledger = ctx
        .ledger
        .as_deref_mut()
        .ok_or(DppError::MissingCapability("privacy ledger"))?;
    match ledger.enforce_budget(&group, max_epsilon)? {
        crate::dp::BudgetOutcome::Pass { .. } => Ok(HookOut::PassThrough(0)),
        crate::dp::BudgetOutcome::Fail { spent, max_epsilon } => Err(DppError::BudgetExceeded {
            group,
            spent,
            max_epsilon,
        }),
    }
}

/// Builds the fixed command table.
///
/// Edge-side (`local`): `get_data`, `filter`, `in_geofence_cond`,
/// `train_local`, `train_local_dp`. Coordinator-side (`global`):
/// `accumulate`, `average`, and the budget checks `enforce_dp_budget`,
/// `enforce_privacy_budget`, `check_privacy_budget` (three names, one
/// meaning, so policies written against any of them resolve). `return` runs
/// at either site.
pub fn builtin_registry() -> CommandRegistry {
    let mut r = CommandRegistry::new();

    r.register("get_data", 1, Site::Local, |_, inv, inputs| {
        dataset(&inv.name, inputs[0])?;
        Ok(HookOut::PassThrough(0))
    });

    r.register("filter", 1, Site::Local, |_, inv, inputs| {
        let d = dataset(&inv.name, inputs[0])?;
        let tags = string_list_arg(inv, "sensors")?;
        Ok(HookOut::New(Payload::Dataset(filter_columns(d, &tags))))
    });

    r.register("in_geofence_cond", 1, Site::Local, |_, inv, inputs| {
        let d = dataset(&inv.name, inputs[0])?;
        let fence = Geofence::new(
            float_arg(inv, "lat")?,
            float_arg(inv, "lon")?,
            float_arg(inv, "radius_m")?,
        )?;
        Ok(HookOut::New(Payload::Dataset(in_geofence_cond(d, &fence)?)))
    });

    r.register("train_local", 2, Site::Local, |ctx, inv, inputs| {
        let global = model(&inv.name, inputs[0])?;
        let data = dataset(&inv.name, inputs[1])?;
        let task = ctx.task.ok_or(DppError::MissingCapability("training task"))?;
        let cfg = train_config(inv, ctx.seed)?;
        // Filtered datasets are narrower than the shared model; absent
        // feature columns read as zeros so updates stay conformable.
        let ex = data.to_examples()?.pad_features(task.input_dim())?;
        let trained = fl::train_local(global, &ex, &cfg, task)?;
        Ok(HookOut::New(Payload::Update(trained.sub(global)?)))
    });

    r.register("train_local_dp", 2, Site::Local, |ctx, inv, inputs| {
        let global = model(&inv.name, inputs[0])?;
        let data = dataset(&inv.name, inputs[1])?;
        let task = ctx.task.ok_or(DppError::MissingCapability("training task"))?;
        let cfg = train_config(inv, ctx.seed)?;
        let round_size = int_arg(inv, "round_size")?;
        if round_size < 1 {
            return Err(bad_args(&inv.name, "`round_size` must be >= 1"));
        }
        let placement = match inv.args.get("placement") {
            None => "local".to_string(),
            Some(Value::Lit(Literal::Str(s))) => s.clone(),
            Some(_) => return Err(bad_args(&inv.name, "`placement` must be a string")),
        };
        // With server placement the user only clips; the coordinator draws
        // the round's single noise sample on the accumulated sum.
        let noise_sigma = match placement.as_str() {
            "local" => float_arg(inv, "noise_sigma")?,
            "server" => 0.0,
            other => {
                return Err(bad_args(
                    &inv.name,
                    format!("`placement` must be `local` or `server`, got `{other}`"),
                ))
            }
        };
        let dp = DpConfig {
            clip_bound: float_arg(inv, "clip_bound")?,
            noise_sigma,
            round_size: round_size as usize,
        };
        let ex = data.to_examples()?.pad_features(task.input_dim())?;
        let delta = fl::train_local_dp(global, &ex, &cfg, &dp, task, ctx.seed ^ NOISE_SEED_SALT)?;
        Ok(HookOut::New(Payload::Update(delta)))
    });

    r.register("accumulate", 2, Site::Global, |_, inv, inputs| {
        let acc = update(&inv.name, inputs[0])?;
        let upd = update(&inv.name, inputs[1])?;
        Ok(HookOut::New(Payload::Update(fl::accumulate(acc, upd)?)))
    });

    r.register("average", 2, Site::Global, |_, inv, inputs| {
        let global = model(&inv.name, inputs[0])?;
        let sum = update(&inv.name, inputs[1])?;
        let eta = float_arg(inv, "eta")?;
        let n = int_arg(inv, "n")?;
        if n < 1 {
            return Err(bad_args(&inv.name, "`n` must be >= 1"));
        }
        Ok(HookOut::New(Payload::Model(fl::average(
            global, sum, eta, n as usize,
        )?)))
    });

    for name in [
        "enforce_dp_budget",
        "enforce_privacy_budget",
        "check_privacy_budget",
    ] {
        r.register(name, 1, Site::Global, |ctx, inv, _| budget_hook(ctx, inv));
    }

    r.register("return", 1, Site::Both, |_, _, _| Ok(HookOut::PassThrough(0)));

    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, TaskKind};
    use crate::dp::PrivacyLedger;
    use crate::dpp::{invoke, DataPolicyPair};
    use crate::fl::task::{DifferentiableTask, LogisticRegression};
    use crate::policy::parse_policy;

    fn local_ctx<'a>(seed: u64, task: &'a dyn DifferentiableTask) -> CommandCtx<'a> {
        CommandCtx::local(0, seed, task)
    }

    fn data_pair(policy: &str) -> DataPolicyPair {
        let d = generate_task(TaskKind::Classification2Class, 1, 30, 5).unwrap()[0].clone();
        DataPolicyPair::new("user-000/data", Payload::Dataset(d), parse_policy(policy).unwrap())
    }

    #[test]
    fn registry_shape() {
        let r = builtin_registry();
        for (name, arity, site) in [
            ("get_data", 1, Site::Local),
            ("filter", 1, Site::Local),
            ("in_geofence_cond", 1, Site::Local),
            ("train_local", 2, Site::Local),
            ("train_local_dp", 2, Site::Local),
            ("accumulate", 2, Site::Global),
            ("average", 2, Site::Global),
            ("enforce_dp_budget", 1, Site::Global),
            ("enforce_privacy_budget", 1, Site::Global),
            ("check_privacy_budget", 1, Site::Global),
            ("return", 1, Site::Both),
        ] {
            let spec = r.get(name).unwrap_or_else(|| panic!("missing {name}"));
            assert_eq!(spec.arity(), arity, "{name}");
            assert_eq!(spec.site(), site, "{name}");
        }
    }

    #[test]
    fn filter_command_drops_tagged_columns() {
        let r = builtin_registry();
        let task = LogisticRegression::new(6);
        let mut ctx = local_ctx(0, &task);
        let pair = data_pair("get_data . filter(sensors=[\"mic\",\"loc\"]) . return");
        let fetched = invoke(&r, &mut ctx, &CommandInvocation::bare("get_data"), &[&pair]).unwrap();
        let inv = CommandInvocation::bare("filter").with_arg(
            "sensors",
            Value::List(vec!["mic".into(), "loc".into()]),
        );
        let filtered = invoke(&r, &mut ctx, &inv, &[&fetched]).unwrap();
        match filtered.payload_internal() {
            Payload::Dataset(d) => {
                assert!(d.column("mic_level").is_none());
                assert!(d.column("lat").is_none());
                assert!(d.column("f0").is_some());
            }
            _ => panic!("expected dataset"),
        }
        assert_eq!(filtered.policy().to_string(), "return");
    }

    #[test]
    fn training_commands_produce_the_library_updates() {
        let r = builtin_registry();
        let task = LogisticRegression::new(6);
        let global = task.init_params(3);
        let model_pair = DataPolicyPair::new(
            "model",
            Payload::Model(global.clone()),
            parse_policy("(train_local + train_local_dp)* . return").unwrap(),
        );
        let data = data_pair("(train_local + train_local_dp)*");
        let seed = 42;
        let mut ctx = local_ctx(seed, &task);

        let inv = CommandInvocation::bare("train_local")
            .with_arg("epochs", 2i64)
            .with_arg("lr", 0.1);
        let out = invoke(&r, &mut ctx, &inv, &[&model_pair, &data]).unwrap();
        let want = {
            let ex = match data.payload_internal() {
                Payload::Dataset(d) => d.to_examples().unwrap(),
                _ => unreachable!(),
            };
            let cfg = TrainConfig {
                epochs: 2,
                local_lr: 0.1,
                batch_size: usize::MAX,
                seed,
            };
            fl::train_local(&global, &ex, &cfg, &task)
                .unwrap()
                .sub(&global)
                .unwrap()
        };
        match out.payload_internal() {
            Payload::Update(u) => assert_eq!(u, &want),
            _ => panic!("expected update"),
        }

        // Server placement clips but adds no local noise.
        let inv_dp = CommandInvocation::bare("train_local_dp")
            .with_arg("epochs", 2i64)
            .with_arg("lr", 0.1)
            .with_arg("clip_bound", 0.05)
            .with_arg("noise_sigma", 99.0)
            .with_arg("round_size", 4i64)
            .with_arg("placement", "server");
        let out_dp = invoke(&r, &mut ctx, &inv_dp, &[&model_pair, &data]).unwrap();
        let clipped = fl::clip_update(&want, 0.05);
        match out_dp.payload_internal() {
            Payload::Update(u) => {
                assert_eq!(u, &clipped);
                assert!(u.l2_norm() <= 0.05 + 1e-12);
            }
            _ => panic!("expected update"),
        }

        // Local placement is the full pipeline, reproducible from the seed.
        let inv_dp_local = CommandInvocation::bare("train_local_dp")
            .with_arg("epochs", 2i64)
            .with_arg("lr", 0.1)
            .with_arg("clip_bound", 0.05)
            .with_arg("noise_sigma", 0.3)
            .with_arg("round_size", 4i64);
        let out_noised = invoke(&r, &mut ctx, &inv_dp_local, &[&model_pair, &data]).unwrap();
        let dp = DpConfig {
            clip_bound: 0.05,
            noise_sigma: 0.3,
            round_size: 4,
        };
        let ex = match data.payload_internal() {
            Payload::Dataset(d) => d.to_examples().unwrap(),
            _ => unreachable!(),
        };
        let cfg = TrainConfig {
            epochs: 2,
            local_lr: 0.1,
            batch_size: usize::MAX,
            seed,
        };
        let want_noised =
            fl::train_local_dp(&global, &ex, &cfg, &dp, &task, seed ^ NOISE_SEED_SALT).unwrap();
        match out_noised.payload_internal() {
            Payload::Update(u) => assert_eq!(u, &want_noised),
            _ => panic!("expected update"),
        }
    }

    #[test]
    fn aggregation_commands_match_the_library_algebra() {
        let r = builtin_registry();
        let mut ledger = PrivacyLedger::new(1e-8).unwrap();
        let mut ctx = CommandCtx::global(0, 0, &mut ledger);

        let policy = "accumulate* . average . return";
        let u1 = DataPolicyPair::new(
            "a",
            Payload::Update(ModelParams::flat("w", vec![1.0, 2.0]).unwrap()),
            parse_policy(policy).unwrap(),
        );
        let u2 = DataPolicyPair::new(
            "b",
            Payload::Update(ModelParams::flat("w", vec![10.0, 20.0]).unwrap()),
            parse_policy(policy).unwrap(),
        );
        let acc = invoke(
            &r,
            &mut ctx,
            &CommandInvocation::bare("accumulate"),
            &[&u1, &u2],
        )
        .unwrap();
        match acc.payload_internal() {
            Payload::Update(u) => assert_eq!(u.values().collect::<Vec<_>>(), vec![11.0, 22.0]),
            _ => panic!("expected update"),
        }

        let global = DataPolicyPair::new(
            "model",
            Payload::Model(ModelParams::flat("w", vec![100.0, 200.0]).unwrap()),
            parse_policy("average . return").unwrap(),
        );
        let inv = CommandInvocation::bare("average")
            .with_arg("eta", 1.0)
            .with_arg("n", 2i64);
        let new_model = invoke(&r, &mut ctx, &inv, &[&global, &acc]).unwrap();
        match new_model.payload_internal() {
            Payload::Model(m) => assert_eq!(m.values().collect::<Vec<_>>(), vec![105.5, 211.0]),
            _ => panic!("expected model"),
        }
        assert!(new_model.can_return());
    }

    #[test]
    fn budget_commands_consult_the_ledger() {
        let r = builtin_registry();
        let mut ledger = PrivacyLedger::new(1e-8).unwrap();
        ledger.register_group("gr1");
        for _ in 0..200 {
            ledger.charge_round("gr2", 1e-2, 0.5).unwrap();
        }

        let pair = |policy: &str| {
            DataPolicyPair::new(
                "m",
                Payload::Model(ModelParams::flat("w", vec![0.0]).unwrap()),
                parse_policy(policy).unwrap(),
            )
        };

        for name in [
            "enforce_dp_budget",
            "enforce_privacy_budget",
            "check_privacy_budget",
        ] {
            let mut ctx = CommandCtx::global(0, 0, &mut ledger);
            let p = pair(&format!("{name} . return"));
            let ok = invoke(
                &r,
                &mut ctx,
                &CommandInvocation::bare(name)
                    .with_arg("group", "gr1")
                    .with_arg("eps", 1.0),
                &[&p],
            )
            .unwrap();
            assert!(ok.can_return());

            let mut ctx = CommandCtx::global(0, 0, &mut ledger);
            let over = invoke(
                &r,
                &mut ctx,
                &CommandInvocation::bare(name)
                    .with_arg("group", "gr2")
                    .with_arg("max_eps", 1.0),
                &[&pair(&format!("{name} . return"))],
            )
            .unwrap_err();
            assert!(matches!(over, DppError::BudgetExceeded { .. }), "{over}");
        }

        // Without a ledger the check fails closed.
        let task = LogisticRegression::new(2);
        let mut no_ledger = CommandCtx {
            site: Site::Global,
            round: 0,
            seed: 0,
            task: Some(&task),
            ledger: None,
        };
        let err = invoke(
            &r,
            &mut no_ledger,
            &CommandInvocation::bare("enforce_dp_budget")
                .with_arg("group", "gr1")
                .with_arg("eps", 1.0),
            &[&pair("enforce_dp_budget . return")],
        )
        .unwrap_err();
        assert!(matches!(err, DppError::MissingCapability(_)));

        let mut ctx = CommandCtx::global(0, 0, &mut ledger);
        let missing_group = invoke(
            &r,
            &mut ctx,
            &CommandInvocation::bare("enforce_dp_budget").with_arg("eps", 1.0),
            &[&pair("enforce_dp_budget . return")],
        )
        .unwrap_err();
        assert!(matches!(missing_group, DppError::BadArgs { .. }));
    }

    #[test]
    fn wrong_payload_kinds_are_rejected() {
        let r = builtin_registry();
        let task = LogisticRegression::new(6);
        let mut ctx = local_ctx(0, &task);
        let scalar = DataPolicyPair::new(
            "s",
            Payload::Scalar(1.0),
            parse_policy("get_data . filter(sensors=[\"mic\"])").unwrap(),
        );
        let err = invoke(
            &r,
            &mut ctx,
            &CommandInvocation::bare("get_data"),
            &[&scalar],
        )
        .unwrap_err();
        assert!(matches!(err, DppError::PayloadKind { .. }));
    }
}
