use std::path::Path;

use qsep_core::bellman::{extract_policy, read_value_function, ValueFunction};
use qsep_core::model::{ControlStrategy, SystemModel};

use crate::CliError;

/// Default feedback window of the bang-bang strategy, in steps.
pub const BANG_BANG_WINDOW: usize = 20;

/// Parses a strategy spec:
///
/// | spec | control |
/// |---|---|
/// | `zero`, `max`, `min` | `0`, `u_max`, `u_min` |
/// | `const:U` | `U` |
/// | `bang_bang[:W]` | `u_max` if the last `W` increments sum positive, else `u_min` |
/// | `randomized[:SALT]` | hashed pick from the control grid |
/// | `separated` | the policy of a value function |
pub fn parse(
    spec: &str,
    model: &SystemModel,
    vf: Option<&ValueFunction>,
) -> Result<ControlStrategy, CliError> {
    let (head, arg) = match spec.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (spec, None),
    };
    let bad = |what: &str| CliError::Usage(format!("strategy `{spec}`: {what}"));
    let number = |a: Option<&str>| -> Result<Option<f64>, CliError> {
        a.map(|s| {
            s.parse::<f64>()
                .map_err(|_| bad("argument is not a number"))
        })
        .transpose()
    };
    let r = &model.range;
    let s = match head {
        "zero" | "max" | "min" => {
            if arg.is_some() {
                return Err(bad("takes no argument"));
            }
            let u = match head {
                "zero" => 0.0,
                "max" => r.u_max,
                _ => r.u_min,
            };
            ControlStrategy::constant(u).with_name(head)
        }
        "const" => {
            let u = number(arg)?.ok_or_else(|| bad("needs a value, as in const:0.5"))?;
            r.check(u).map_err(|e| bad(&e.to_string()))?;
            ControlStrategy::constant(u)
        }
        "bang_bang" => {
            let w = match arg {
                Some(a) => a
                    .parse::<usize>()
                    .map_err(|_| bad("window must be a positive integer"))?,
                None => BANG_BANG_WINDOW,
            };
            if w == 0 {
                return Err(bad("window must be a positive integer"));
            }
            ControlStrategy::bang_bang(w, r.u_min, r.u_max).with_name(spec)
        }
        "randomized" => {
            let salt = match arg {
                Some(a) => a
                    .parse::<u64>()
                    .map_err(|_| bad("salt must be an unsigned integer"))?,
                None => 1,
            };
            ControlStrategy::randomized(r.grid.clone(), salt).with_name(spec)
        }
        "separated" => {
            if arg.is_some() {
                return Err(bad("takes no argument"));
            }
            let vf = vf.ok_or_else(|| bad("needs a value function (--value-function DIR)"))?;
            extract_policy(vf.clone()).strategy("separated")
        }
        _ => return Err(bad("unknown strategy")),
    };
    Ok(s)
}

pub fn load_value_function(dir: &Path) -> Result<ValueFunction, CliError> {
    read_value_function(dir)
        .map_err(|e| CliError::Usage(format!("value function {}: {e}", dir.display())))
}
