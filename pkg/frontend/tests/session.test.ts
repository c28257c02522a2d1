import { describe, expect, it } from "vitest";

import {
  B_MAX,
  B_MIN,
  LAMBDA_MAX,
  LAMBDA_MIN,
  TuningSession,
  clampB,
  clampLambda,
} from "../src/session.js";

describe("slider clamping", () => {
  it("clamps lambda to [0, 5]", () => {
    expect(clampLambda(-1)).toBe(LAMBDA_MIN);
    expect(clampLambda(7.3)).toBe(LAMBDA_MAX);
    expect(clampLambda(2.5)).toBe(2.5);
  });

  it("snaps lambda to 0.01 steps without float dust", () => {
    expect(clampLambda(0.123)).toBe(0.12);
    expect(clampLambda(0.125)).toBe(0.13);
    expect(clampLambda(0.1 + 0.2)).toBe(0.3);
  });

  it("clamps b to [-50, 50] in 0.5 steps", () => {
    expect(clampB(-60)).toBe(B_MIN);
    expect(clampB(99)).toBe(B_MAX);
    expect(clampB(3.3)).toBe(3.5);
    expect(clampB(3.2)).toBe(3);
    expect(clampB(-12.75)).toBe(-12.5);
  });

  it("maps non-finite input to the range minimum", () => {
    expect(clampLambda(NaN)).toBe(LAMBDA_MIN);
    expect(clampB(Infinity)).toBe(B_MIN);
    expect(clampB(-Infinity)).toBe(B_MIN);
  });
});

describe("TuningSession dirty tracking", () => {
  it("starts clean after loading a channel", () => {
    const s = new TuningSession();
    s.loadChannel("m1", 0.5, -2);
    expect(s.dirty).toBe(false);
    expect(s.lambda).toBe(0.5);
    expect(s.b).toBe(-2);
  });

  it("becomes dirty when a slider moves and clean when it moves back", () => {
    const s = new TuningSession();
    s.loadChannel("m1", 0.5, -2);
    s.setLambda(0.6);
    expect(s.dirty).toBe(true);
    s.setLambda(0.5);
    expect(s.dirty).toBe(false);
    s.setB(0);
    expect(s.dirty).toBe(true);
  });

  it("markSaved adopts the current values as the baseline", () => {
    const s = new TuningSession();
    s.loadChannel("m1", 0, 0);
    s.setLambda(1.25);
    s.setB(10);
    expect(s.dirty).toBe(true);
    s.markSaved();
    expect(s.dirty).toBe(false);
    expect(s.lastSaved).toEqual({ lambda: 1.25, b: 10 });
  });

  it("clamps out-of-range server values on load", () => {
    const s = new TuningSession();
    s.loadChannel("m1", 9, -200);
    expect(s.lambda).toBe(LAMBDA_MAX);
    expect(s.b).toBe(B_MIN);
    expect(s.dirty).toBe(false);
  });

  it("loading another channel resets the baseline", () => {
    const s = new TuningSession();
    s.loadChannel("m1", 0.5, 0);
    s.setLambda(2);
    s.loadChannel("m2", 1, 3);
    expect(s.channel).toBe("m2");
    expect(s.dirty).toBe(false);
    expect(s.lambda).toBe(1);
  });
});
